//! Class trees: parsing, subclass sets and ancestor closures.
//!
//! Classes are numbered densely in first-appearance order of the hierarchy
//! document. The implicit root (the whole population) is not a class; classes
//! without a parent are top-level.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hierarchy of the bone-marrow populations used throughout the examples and
/// the synthetic benchmark: four flat populations plus HSPC with its myeloid
/// and lymphoid subsets.
pub const CELL_HIERARCHY: &str = "\
# parent<TAB>child; bare names are top-level classes
T lymphocytes
B lymphocytes
Monocytes
Mast cells
HSPC\tMyeloid HSPC
HSPC\tLymphoid HSPC
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

impl ClassId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    names: Vec<String>,
    index: HashMap<String, ClassId>,
    parent: Vec<Option<ClassId>>,
    children: Vec<Vec<ClassId>>,
    /// S_A, sorted ascending, self included.
    subclasses: Vec<Vec<ClassId>>,
    /// Ancestors, sorted ascending, self included.
    ancestors: Vec<Vec<ClassId>>,
    depth: Vec<usize>,
    /// Children before parents.
    postorder: Vec<ClassId>,
}

impl Hierarchy {
    /// Parses `parent<TAB>child` lines. Lines starting with `#` and blank
    /// lines are skipped; a line holding a single name declares a class.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, ClassId> = HashMap::new();
        let mut parent: Vec<Option<ClassId>> = Vec::new();

        let mut intern = |name: &str, names: &mut Vec<String>, parent: &mut Vec<Option<ClassId>>| {
            if let Some(&id) = index.get(name) {
                return id;
            }
            let id = ClassId(names.len());
            names.push(name.to_owned());
            parent.push(None);
            index.insert(name.to_owned(), id);
            id
        };

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            match fields.as_slice() {
                [name] => {
                    intern(name, &mut names, &mut parent);
                }
                [p, c] => {
                    if p.is_empty() || c.is_empty() {
                        return Err(Error::HierarchySyntax {
                            line: lineno + 1,
                            msg: "empty class name".into(),
                        });
                    }
                    let pid = intern(p, &mut names, &mut parent);
                    let cid = intern(c, &mut names, &mut parent);
                    if pid == cid {
                        return Err(Error::Cycle(names[pid.0].clone()));
                    }
                    match parent[cid.0] {
                        None => parent[cid.0] = Some(pid),
                        Some(existing) if existing == pid => {}
                        Some(existing) => {
                            return Err(Error::DuplicateParent {
                                child: names[cid.0].clone(),
                                first: names[existing.0].clone(),
                                second: names[pid.0].clone(),
                            })
                        }
                    }
                }
                _ => {
                    return Err(Error::HierarchySyntax {
                        line: lineno + 1,
                        msg: "expected `parent<TAB>child` or a single class name".into(),
                    })
                }
            }
        }

        if names.is_empty() {
            return Err(Error::EmptyHierarchy);
        }
        let index: HashMap<String, ClassId> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ClassId(i)))
            .collect();
        Self::from_parents(names, index, parent)
    }

    /// Builds a hierarchy from explicit parent links, e.g. for generated trees.
    pub fn from_parent_links(names: Vec<String>, parent: Vec<Option<usize>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyHierarchy);
        }
        if names.len() != parent.len() {
            return Err(Error::InvalidArgument(
                "names and parent links differ in length".into(),
            ));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), ClassId(i)).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        let mut links = Vec::with_capacity(parent.len());
        for p in parent {
            match p {
                Some(p) if p >= names.len() => {
                    return Err(Error::InvalidArgument(format!("parent index {p} out of range")))
                }
                other => links.push(other.map(ClassId)),
            }
        }
        Self::from_parents(names, index, links)
    }

    fn from_parents(
        names: Vec<String>,
        index: HashMap<String, ClassId>,
        parent: Vec<Option<ClassId>>,
    ) -> Result<Self> {
        let c = names.len();

        // Ancestor chains; a chain longer than c means a cycle.
        let mut ancestors = Vec::with_capacity(c);
        let mut depth = Vec::with_capacity(c);
        for a in 0..c {
            let mut chain = vec![ClassId(a)];
            let mut cur = parent[a];
            while let Some(p) = cur {
                if chain.len() > c || p.0 == a {
                    return Err(Error::Cycle(names[a].clone()));
                }
                chain.push(p);
                cur = parent[p.0];
            }
            depth.push(chain.len() - 1);
            chain.sort_unstable();
            ancestors.push(chain);
        }

        let mut children = vec![Vec::new(); c];
        for (a, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[p.0].push(ClassId(a));
            }
        }

        let mut subclasses = vec![Vec::new(); c];
        for (b, anc) in ancestors.iter().enumerate() {
            for a in anc {
                subclasses[a.0].push(ClassId(b));
            }
        }

        let mut postorder = Vec::with_capacity(c);
        let mut stack: Vec<(ClassId, bool)> = (0..c)
            .rev()
            .filter(|&a| parent[a].is_none())
            .map(|a| (ClassId(a), false))
            .collect();
        while let Some((a, expanded)) = stack.pop() {
            if expanded {
                postorder.push(a);
            } else {
                stack.push((a, true));
                for &ch in children[a.0].iter().rev() {
                    stack.push((ch, false));
                }
            }
        }
        debug_assert_eq!(postorder.len(), c);

        Ok(Hierarchy {
            names,
            index,
            parent,
            children,
            subclasses,
            ancestors,
            depth,
            postorder,
        })
    }

    /// The seven-population tree of [`CELL_HIERARCHY`].
    pub fn cell_populations() -> Self {
        Self::parse(CELL_HIERARCHY).expect("built-in hierarchy is valid")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = ClassId> + '_ {
        (0..self.names.len()).map(ClassId)
    }

    pub fn name(&self, a: ClassId) -> &str {
        &self.names[a.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<ClassId> {
        self.index
            .get(name.trim())
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }

    pub fn parent(&self, a: ClassId) -> Option<ClassId> {
        self.parent[a.0]
    }

    pub fn children(&self, a: ClassId) -> &[ClassId] {
        &self.children[a.0]
    }

    /// S_A: every class reachable downward from `a`, including `a`.
    pub fn subclasses(&self, a: ClassId) -> &[ClassId] {
        &self.subclasses[a.0]
    }

    /// `a` and every class above it.
    pub fn ancestors(&self, a: ClassId) -> &[ClassId] {
        &self.ancestors[a.0]
    }

    /// Number of proper ancestors; top-level classes have depth 0.
    pub fn depth(&self, a: ClassId) -> usize {
        self.depth[a.0]
    }

    pub fn is_leaf(&self, a: ClassId) -> bool {
        self.children[a.0].is_empty()
    }

    /// True when `b` is in S_A.
    pub fn is_subclass(&self, b: ClassId, a: ClassId) -> bool {
        self.ancestors[b.0].binary_search(&a).is_ok()
    }

    /// Classes in an order where every class follows all of its subclasses.
    pub fn postorder(&self) -> &[ClassId] {
        &self.postorder
    }

    pub fn ancestor_closure<'a, I>(&self, set: I) -> BTreeSet<ClassId>
    where
        I: IntoIterator<Item = &'a ClassId>,
    {
        set.into_iter()
            .flat_map(|a| self.ancestors[a.0].iter().copied())
            .collect()
    }

    /// Drops every class that is a proper ancestor of another class in `set`,
    /// leaving mutually incomparable most-specific classes in ascending order.
    pub fn most_specific(&self, set: &[ClassId]) -> Vec<ClassId> {
        let mut out: Vec<ClassId> = set
            .iter()
            .copied()
            .filter(|&a| !set.iter().any(|&b| b != a && self.is_subclass(b, a)))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Pairs `(A, B)` with B in S_A and A != B: the edges of the closure.
    pub fn closure_pairs(&self) -> impl Iterator<Item = (ClassId, ClassId)> + '_ {
        self.ids().flat_map(move |a| {
            self.subclasses(a)
                .iter()
                .copied()
                .filter(move |&b| b != a)
                .map(move |b| (a, b))
        })
    }

    /// Serializes back to the edge-list format. Parsing the result yields the
    /// same ids.
    pub fn to_text(&self) -> String {
        // Bare declarations first so ids survive any parent/child ordering.
        let mut out = String::new();
        for a in self.ids() {
            out.push_str(self.name(a));
            out.push('\n');
        }
        for a in self.ids() {
            if let Some(p) = self.parent(a) {
                out.push_str(self.name(p));
                out.push('\t');
                out.push_str(self.name(a));
                out.push('\n');
            }
        }
        out
    }
}

/// Free-function form of [`Hierarchy::subclasses`].
pub fn subclasses(h: &Hierarchy, a: ClassId) -> BTreeSet<ClassId> {
    h.subclasses(a).iter().copied().collect()
}

/// Union of the ancestor sets of every member of `set`, self included.
pub fn ancestor_closure(h: &Hierarchy, set: &BTreeSet<ClassId>) -> BTreeSet<ClassId> {
    h.ancestor_closure(set.iter())
}
