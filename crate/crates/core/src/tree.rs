//! Rooted spanning trees over placed members, in a single edge-list shape
//! shared by the baseline builders and by dissemination topologies extracted
//! from simulation runs.

use serde::Serialize;

use crate::geometry::{distance, Point};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree<T> {
    /// Caller-supplied identifiers, index 0 is the root.
    pub ids: Vec<u32>,
    pub positions: Vec<Point<T>>,
    /// `parent[i]` is an index into `ids`; `None` only for the root.
    pub parent: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    pub length: f64,
}

impl<T: Scalar> SpanningTree<T> {
    pub fn with_root(id: u32, position: Point<T>) -> Self {
        SpanningTree { ids: vec![id], positions: vec![position], parent: vec![None] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, position: Point<T>, parent: usize) -> usize {
        assert!(parent < self.ids.len(), "parent index out of range");
        self.ids.push(id);
        self.positions.push(position);
        self.parent.push(Some(parent));
        self.ids.len() - 1
    }

    pub fn edge_length(&self, child: usize) -> T {
        match self.parent[child] {
            Some(p) => distance(self.positions[p], self.positions[child]),
            None => T::zero(),
        }
    }

    pub fn edges(&self) -> Vec<Edge> {
        (0..self.len())
            .filter_map(|i| {
                self.parent[i].map(|p| Edge { from: self.ids[p], to: self.ids[i], length: self.edge_length(i).as_f64() })
            })
            .collect()
    }

    pub fn total_length(&self) -> T {
        (0..self.len()).map(|i| self.edge_length(i)).sum()
    }

    /// Hop count from the root.
    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent[i] {
            d += 1;
            i = p;
            assert!(d <= self.len(), "cycle in parent links");
        }
        d
    }

    /// Summed edge length from the root down to node `i`.
    pub fn root_path_length(&self, mut i: usize) -> T {
        let mut total = T::zero();
        let mut steps = 0;
        while let Some(p) = self.parent[i] {
            total = total + distance(self.positions[p], self.positions[i]);
            i = p;
            steps += 1;
            assert!(steps <= self.len(), "cycle in parent links");
        }
        total
    }

    pub fn child_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.len()];
        for p in self.parent.iter().flatten() {
            c[*p] += 1;
        }
        c
    }

    pub fn max_fanout(&self) -> usize {
        self.child_counts().into_iter().max().unwrap_or(0)
    }

    /// n nodes, n-1 edges, exactly one root and every node reaches it.
    pub fn is_spanning_tree(&self) -> bool {
        let n = self.len();
        if n == 0 || self.parent[0].is_some() {
            return false;
        }
        if self.parent.iter().filter(|p| p.is_none()).count() != 1 {
            return false;
        }
        if self.parent.iter().flatten().any(|&p| p >= n) {
            return false;
        }
        // Walk up from every node with a step bound; a cycle never reaches the root.
        (0..n).all(|mut i| {
            let mut steps = 0;
            while let Some(p) = self.parent[i] {
                i = p;
                steps += 1;
                if steps > n {
                    return false;
                }
            }
            i == 0
        })
    }
}
