//! Object-query generation schemes.
//!
//! Queries are laid out instance-major: query `j` belongs to instance
//! `j / n_p`. Every query records which embeddings were summed to build it,
//! so the sharing structure of a scheme can be inspected directly.
//!
//! * naive: one independent embedding per query.
//! * hierarchical: `q[i][j] = ins[i] + pts[j]`, point embeddings shared by
//!   every instance.
//! * hybrid: `q[j] = ins[j / n_p] + pts[j]`, every point embedding used once.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryScheme {
    Naive,
    Hierarchical,
    Hybrid,
}

impl QueryScheme {
    pub const ALL: [QueryScheme; 3] = [
        QueryScheme::Naive,
        QueryScheme::Hierarchical,
        QueryScheme::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryScheme::Naive => "naive",
            QueryScheme::Hierarchical => "hierarchical",
            QueryScheme::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for QueryScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown query scheme {s:?} (valid: naive, hierarchical, hybrid)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryConfig {
    pub num_instances: usize,
    pub points_per_instance: usize,
    pub dim: usize,
}

impl QueryConfig {
    pub fn new(num_instances: usize, points_per_instance: usize, dim: usize) -> Result<Self> {
        if num_instances < 1 || points_per_instance < 2 || dim < 1 {
            return Err(Error::InvalidArgument(format!(
                "query config needs N_I >= 1, n_p >= 2, d >= 1 (got {num_instances}, {points_per_instance}, {dim})"
            )));
        }
        Ok(QueryConfig {
            num_instances,
            points_per_instance,
            dim,
        })
    }

    pub fn total(&self) -> usize {
        self.num_instances * self.points_per_instance
    }

    /// Fixed block layout: query `j` belongs to instance `j / n_p`.
    pub fn instance_of(&self) -> Vec<usize> {
        (0..self.total())
            .map(|j| j / self.points_per_instance)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmbeddingKind {
    /// Naive per-query embedding.
    Query,
    Instance,
    Point,
}

/// Embedding tables a scheme sums from.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub scheme: QueryScheme,
    /// `N_I × d` for hierarchical/hybrid, absent for naive.
    pub instance: Option<Tensor2>,
    /// Naive: `N_I·n_p × d` per-query table. Hierarchical: `n_p × d`.
    /// Hybrid: `N_I·n_p × d`.
    pub point: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Tensor2,
    pub instance_of: Vec<usize>,
    pub provenance: Vec<Vec<(EmbeddingKind, usize)>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.instance_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_of.is_empty()
    }
}

fn uniform_table(rows: usize, d: usize, rng: &mut impl Rng) -> Tensor2 {
    let bound = 1.0 / (d as f64).sqrt();
    Tensor2::from_fn(rows, d, |_, _| rng.gen_range(-bound..=bound))
}

pub fn random_tables(cfg: &QueryConfig, scheme: QueryScheme, rng: &mut impl Rng) -> EmbeddingTables {
    let d = cfg.dim;
    match scheme {
        QueryScheme::Naive => EmbeddingTables {
            scheme,
            instance: None,
            point: uniform_table(cfg.total(), d, rng),
        },
        QueryScheme::Hierarchical => {
            let instance = uniform_table(cfg.num_instances, d, rng);
            let point = uniform_table(cfg.points_per_instance, d, rng);
            EmbeddingTables {
                scheme,
                instance: Some(instance),
                point,
            }
        }
        QueryScheme::Hybrid => {
            let instance = uniform_table(cfg.num_instances, d, rng);
            let point = uniform_table(cfg.total(), d, rng);
            EmbeddingTables {
                scheme,
                instance: Some(instance),
                point,
            }
        }
    }
}

/// Embeddings summed into query `j`.
pub fn provenance_of(cfg: &QueryConfig, scheme: QueryScheme, j: usize) -> Vec<(EmbeddingKind, usize)> {
    let n_p = cfg.points_per_instance;
    match scheme {
        QueryScheme::Naive => vec![(EmbeddingKind::Query, j)],
        QueryScheme::Hierarchical => vec![
            (EmbeddingKind::Instance, j / n_p),
            (EmbeddingKind::Point, j % n_p),
        ],
        QueryScheme::Hybrid => vec![(EmbeddingKind::Instance, j / n_p), (EmbeddingKind::Point, j)],
    }
}

/// Sums the tables into the query matrix according to the scheme.
pub fn assemble(cfg: &QueryConfig, tables: &EmbeddingTables) -> Result<QuerySet> {
    let d = cfg.dim;
    let expected_points = match tables.scheme {
        QueryScheme::Hierarchical => cfg.points_per_instance,
        _ => cfg.total(),
    };
    if tables.point.shape() != (expected_points, d) {
        return Err(Error::ShapeMismatch {
            op: "assemble point table",
            left: (expected_points, d),
            right: tables.point.shape(),
        });
    }
    if let Some(ins) = &tables.instance {
        if ins.shape() != (cfg.num_instances, d) {
            return Err(Error::ShapeMismatch {
                op: "assemble instance table",
                left: (cfg.num_instances, d),
                right: ins.shape(),
            });
        }
    } else if tables.scheme != QueryScheme::Naive {
        return Err(Error::InvalidArgument(format!(
            "{} scheme needs an instance table",
            tables.scheme
        )));
    }

    let mut queries = Tensor2::zeros(cfg.total(), d);
    let mut provenance = Vec::with_capacity(cfg.total());
    for j in 0..cfg.total() {
        let prov = provenance_of(cfg, tables.scheme, j);
        let row = queries.row_mut(j);
        for &(kind, idx) in &prov {
            let src = match kind {
                EmbeddingKind::Instance => tables.instance.as_ref().expect("checked").row(idx),
                EmbeddingKind::Point | EmbeddingKind::Query => tables.point.row(idx),
            };
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        provenance.push(prov);
    }
    Ok(QuerySet {
        queries,
        instance_of: cfg.instance_of(),
        provenance,
    })
}

/// Routes `dL/dqueries` back to the embedding tables.
pub fn assemble_backward(
    cfg: &QueryConfig,
    scheme: QueryScheme,
    dqueries: &Tensor2,
) -> (Option<Tensor2>, Tensor2) {
    let d = cfg.dim;
    let mut dins = match scheme {
        QueryScheme::Naive => None,
        _ => Some(Tensor2::zeros(cfg.num_instances, d)),
    };
    let mut dpts = match scheme {
        QueryScheme::Hierarchical => Tensor2::zeros(cfg.points_per_instance, d),
        _ => Tensor2::zeros(cfg.total(), d),
    };
    for j in 0..cfg.total() {
        let g = dqueries.row(j);
        for (kind, idx) in provenance_of(cfg, scheme, j) {
            let dst = match kind {
                EmbeddingKind::Instance => dins.as_mut().expect("scheme has instances").row_mut(idx),
                EmbeddingKind::Point | EmbeddingKind::Query => dpts.row_mut(idx),
            };
            for (o, v) in dst.iter_mut().zip(g) {
                *o += v;
            }
        }
    }
    (dins, dpts)
}

pub fn gen_naive(cfg: &QueryConfig, rng: &mut impl Rng) -> Result<(QuerySet, EmbeddingTables)> {
    let t = random_tables(cfg, QueryScheme::Naive, rng);
    Ok((assemble(cfg, &t)?, t))
}

pub fn gen_hierarchical(
    cfg: &QueryConfig,
    rng: &mut impl Rng,
) -> Result<(QuerySet, EmbeddingTables)> {
    let t = random_tables(cfg, QueryScheme::Hierarchical, rng);
    Ok((assemble(cfg, &t)?, t))
}

pub fn gen_hybrid(cfg: &QueryConfig, rng: &mut impl Rng) -> Result<(QuerySet, EmbeddingTables)> {
    let t = random_tables(cfg, QueryScheme::Hybrid, rng);
    Ok((assemble(cfg, &t)?, t))
}

pub fn generate(
    cfg: &QueryConfig,
    scheme: QueryScheme,
    rng: &mut impl Rng,
) -> Result<(QuerySet, EmbeddingTables)> {
    match scheme {
        QueryScheme::Naive => gen_naive(cfg, rng),
        QueryScheme::Hierarchical => gen_hierarchical(cfg, rng),
        QueryScheme::Hybrid => gen_hybrid(cfg, rng),
    }
}

/// Pairwise embedding sharing between queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingReport {
    /// `(a, b, intra_instance)` for every `a < b` sharing at least one embedding.
    pub shared_pairs: Vec<(usize, usize, bool)>,
    pub intra_instance: usize,
    pub inter_instance: usize,
}

pub fn sharing_signature(qs: &QuerySet) -> SharingReport {
    let n = qs.len();
    let mut shared_pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let shares = qs.provenance[a]
                .iter()
                .any(|e| qs.provenance[b].contains(e));
            if shares {
                shared_pairs.push((a, b, qs.instance_of[a] == qs.instance_of[b]));
            }
        }
    }
    let intra_instance = shared_pairs.iter().filter(|p| p.2).count();
    SharingReport {
        inter_instance: shared_pairs.len() - intra_instance,
        intra_instance,
        shared_pairs,
    }
}

/// Trainable query generator whose tables live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGenerator {
    pub cfg: QueryConfig,
    pub scheme: QueryScheme,
}

impl QueryGenerator {
    pub const INSTANCE_TABLE: &'static str = "query.instance";
    pub const POINT_TABLE: &'static str = "query.point";

    pub fn init(
        cfg: QueryConfig,
        scheme: QueryScheme,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let t = random_tables(&cfg, scheme, rng);
        if let Some(ins) = t.instance {
            store.insert(Self::INSTANCE_TABLE, ins);
        }
        store.insert(Self::POINT_TABLE, t.point);
        QueryGenerator { cfg, scheme }
    }

    pub fn tables(&self, store: &ParamStore) -> EmbeddingTables {
        EmbeddingTables {
            scheme: self.scheme,
            instance: (self.scheme != QueryScheme::Naive)
                .then(|| store.value(Self::INSTANCE_TABLE).clone()),
            point: store.value(Self::POINT_TABLE).clone(),
        }
    }

    pub fn forward(&self, store: &ParamStore) -> Result<QuerySet> {
        assemble(&self.cfg, &self.tables(store))
    }

    pub fn backward(&self, store: &mut ParamStore, dqueries: &Tensor2) -> Result<()> {
        let (dins, dpts) = assemble_backward(&self.cfg, self.scheme, dqueries);
        if let Some(dins) = dins {
            store.accumulate(Self::INSTANCE_TABLE, &dins)?;
        }
        store.accumulate(Self::POINT_TABLE, &dpts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cfg23() -> QueryConfig {
        QueryConfig::new(2, 3, 4).unwrap()
    }

    fn usage(qs: &QuerySet) -> HashMap<(EmbeddingKind, usize), usize> {
        let mut m = HashMap::new();
        for p in &qs.provenance {
            for &e in p {
                *m.entry(e).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn naive_uses_six_distinct_embeddings_once() {
        let (qs, t) = gen_naive(&cfg23(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(qs.len(), 6);
        assert_eq!(t.point.rows(), 6);
        let u = usage(&qs);
        assert_eq!(u.len(), 6);
        assert!(u.values().all(|&c| c == 1));
        assert!(sharing_signature(&qs).shared_pairs.is_empty());
    }

    #[test]
    fn naive_seeds_differ_in_values_not_structure() {
        let (a, _) = gen_naive(&cfg23(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, _) = gen_naive(&cfg23(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.queries, b.queries);
        assert_eq!(a.provenance, b.provenance);
        assert_eq!(a.instance_of, b.instance_of);
    }

    #[test]
    fn hierarchical_builds_six_from_five() {
        let (qs, t) = gen_hierarchical(&cfg23(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(qs.len(), 6);
        assert_eq!(t.instance.as_ref().unwrap().rows() + t.point.rows(), 5);
        let u = usage(&qs);
        for i in 0..2 {
            assert_eq!(u[&(EmbeddingKind::Instance, i)], 3);
        }
        for j in 0..3 {
            assert_eq!(u[&(EmbeddingKind::Point, j)], 2);
        }
        // queries (0, j) and (1, j) share point embedding j
        for j in 0..3 {
            assert!(qs.provenance[j]
                .iter()
                .any(|e| qs.provenance[3 + j].contains(e)));
        }
        let s = sharing_signature(&qs);
        assert_eq!(s.inter_instance, 3);
        assert_eq!(s.intra_instance, 6);
    }

    #[test]
    fn hierarchical_point_perturbation_hits_n_i_queries() {
        let cfg = cfg23();
        let (qs, mut t) = gen_hierarchical(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        t.point.set(1, 2, t.point.get(1, 2) + 0.5);
        let after = assemble(&cfg, &t).unwrap();
        let changed = (0..6)
            .filter(|&j| qs.queries.row(j) != after.queries.row(j))
            .count();
        assert_eq!(changed, cfg.num_instances);
    }

    #[test]
    fn hybrid_builds_six_from_eight_and_never_crosses_instances() {
        let cfg = cfg23();
        let (qs, t) = gen_hybrid(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(t.instance.as_ref().unwrap().rows() + t.point.rows(), 8);
        let u = usage(&qs);
        for j in 0..6 {
            assert_eq!(u[&(EmbeddingKind::Point, j)], 1);
        }
        for i in 0..2 {
            assert_eq!(u[&(EmbeddingKind::Instance, i)], 3);
        }
        let s = sharing_signature(&qs);
        assert_eq!((s.intra_instance, s.inter_instance), (6, 0));
    }

    #[test]
    fn hybrid_perturbations_are_local() {
        let cfg = cfg23();
        let (qs, t) = gen_hybrid(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for j in 0..6 {
            let mut tp = t.clone();
            tp.point.set(j, 0, tp.point.get(j, 0) + 1.0);
            let after = assemble(&cfg, &tp).unwrap();
            let changed: Vec<usize> = (0..6)
                .filter(|&k| qs.queries.row(k) != after.queries.row(k))
                .collect();
            assert_eq!(changed, vec![j]);
        }
        let mut tp = t.clone();
        let ins = tp.instance.as_mut().unwrap();
        ins.set(0, 3, ins.get(0, 3) - 1.0);
        let after = assemble(&cfg, &tp).unwrap();
        let changed: Vec<usize> = (0..6)
            .filter(|&k| qs.queries.row(k) != after.queries.row(k))
            .collect();
        assert_eq!(changed, vec![0, 1, 2]);
    }

    #[test]
    fn backward_is_adjoint_of_assemble() {
        // <assemble(t), G> == <t, assemble_backward(G)> for every scheme
        let cfg = QueryConfig::new(3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for scheme in QueryScheme::ALL {
            let t = random_tables(&cfg, scheme, &mut rng);
            let g = Tensor2::from_fn(cfg.total(), 5, |r, c| ((r * 5 + c) as f64).sin());
            let q = assemble(&cfg, &t).unwrap().queries;
            let lhs: f64 = q.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let (di, dp) = assemble_backward(&cfg, scheme, &g);
            let mut rhs: f64 = t.point.data().iter().zip(dp.data()).map(|(a, b)| a * b).sum();
            if let (Some(ti), Some(di)) = (&t.instance, &di) {
                rhs += ti.data().iter().zip(di.data()).map(|(a, b)| a * b).sum::<f64>();
            }
            assert!((lhs - rhs).abs() < 1e-12, "{scheme}");
        }
    }

    #[test]
    fn embedding_init_is_bounded() {
        let cfg = QueryConfig::new(4, 5, 16).unwrap();
        let t = random_tables(&cfg, QueryScheme::Hybrid, &mut ChaCha8Rng::seed_from_u64(8));
        assert!(t.point.max_abs() <= 0.25);
    }

    #[test]
    fn scheme_parsing_lists_options() {
        assert_eq!("hybrid".parse::<QueryScheme>().unwrap(), QueryScheme::Hybrid);
        let e = "mixed".parse::<QueryScheme>().unwrap_err().to_string();
        assert!(e.contains("naive, hierarchical, hybrid"));
    }
}
