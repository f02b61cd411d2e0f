//! The trainable prefix matrix shared by several tasks, with per-task row
//! index maps.
//!
//! Row `r` of the matrix holds every key and value vector the prefix
//! position contributes, across all layers and attention sites (see
//! [`ModelConfig::prefix_offset`]). A task sees the rows listed in its index
//! map, in that order. Manual designs lay rows out as
//! `[shared | unique(task 0) | unique(task 1) | ...]`; self-adaptive designs
//! start with every row shared and are narrowed by Fisher scores.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, PREFIX_MAGIC};
use crate::error::{Error, Result};
use crate::fisher::FisherReport;
use crate::model::{ModelConfig, PrefixActivations, PrefixSource, Site};
use crate::tensor::{Graph, Tensor, Var};

pub const PREFIX_PARAM: &str = "prefix";
pub const PREFIX_INIT_STD: f64 = 0.02;
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PrefixDesign {
    Manual {
        shared: usize,
        unique_per_task: usize,
        n_tasks: usize,
    },
    SelfAdaptive {
        init_len: usize,
        top_n: usize,
        n_tasks: usize,
    },
}

impl PrefixDesign {
    pub fn manual(shared: usize, unique_per_task: usize, n_tasks: usize) -> Result<Self> {
        let d = Self::Manual {
            shared,
            unique_per_task,
            n_tasks,
        };
        d.validate()?;
        Ok(d)
    }

    /// `Unq(unique_total)+Sha(shared)`: `unique_total` rows split evenly
    /// across tasks.
    pub fn from_totals(unique_total: usize, shared: usize, n_tasks: usize) -> Result<Self> {
        if n_tasks == 0 || unique_total % n_tasks != 0 {
            return Err(Error::Design(format!(
                "{unique_total} unique rows cannot be split evenly over {n_tasks} tasks"
            )));
        }
        Self::manual(shared, unique_total / n_tasks, n_tasks)
    }

    pub fn self_adaptive(init_len: usize, top_n: usize, n_tasks: usize) -> Result<Self> {
        let d = Self::SelfAdaptive {
            init_len,
            top_n,
            n_tasks,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Manual {
                shared,
                unique_per_task,
                n_tasks,
            } => {
                if n_tasks == 0 {
                    return Err(Error::Design("need at least one task".into()));
                }
                if shared + unique_per_task == 0 {
                    return Err(Error::Design("every task needs at least one prefix row".into()));
                }
            }
            Self::SelfAdaptive {
                init_len,
                top_n,
                n_tasks,
            } => {
                if n_tasks == 0 || init_len == 0 || top_n == 0 {
                    return Err(Error::Design(format!("degenerate design {self:?}")));
                }
                if top_n > init_len {
                    return Err(Error::Design(format!(
                        "top_n {top_n} exceeds init_len {init_len}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        match *self {
            Self::Manual { n_tasks, .. } | Self::SelfAdaptive { n_tasks, .. } => n_tasks,
        }
    }

    pub fn total_rows(&self) -> usize {
        match *self {
            Self::Manual {
                shared,
                unique_per_task,
                n_tasks,
            } => shared + unique_per_task * n_tasks,
            Self::SelfAdaptive { init_len, .. } => init_len,
        }
    }
}

impl fmt::Display for PrefixDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Manual {
                shared,
                unique_per_task,
                n_tasks,
            } => match (unique_per_task, shared) {
                (0, s) => write!(f, "Sha({s})"),
                (u, 0) => write!(f, "Unq({})", u * n_tasks),
                (u, s) => write!(f, "Unq({})+Sha({s})", u * n_tasks),
            },
            Self::SelfAdaptive { init_len, top_n, .. } => {
                write!(f, "Adaptive({init_len}, top-{top_n})")
            }
        }
    }
}

/// Row indices task `task` reads under a manual design: shared rows first,
/// then the task's own contiguous unique block.
pub fn indices_for_task(design: &PrefixDesign, task: usize) -> Result<Vec<usize>> {
    let PrefixDesign::Manual {
        shared,
        unique_per_task,
        n_tasks,
    } = *design
    else {
        return Err(Error::Design(
            "index maps of a self-adaptive design come from Fisher selection".into(),
        ));
    };
    if task >= n_tasks {
        return Err(Error::Index(format!("task {task} out of range for {n_tasks} tasks")));
    }
    let start = shared + task * unique_per_task;
    Ok((0..shared).chain(start..start + unique_per_task).collect())
}

/// What a prefix row is used for, derived from the task index maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Shared,
    Unique(usize),
    /// Used by more than one but not all tasks.
    Partial,
    Inactive,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Shared => write!(f, "shared"),
            Region::Unique(t) => write!(f, "unique:{t}"),
            Region::Partial => write!(f, "partial"),
            Region::Inactive => write!(f, "inactive"),
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Region::Shared),
            "partial" => Ok(Region::Partial),
            "inactive" => Ok(Region::Inactive),
            _ => s
                .strip_prefix("unique:")
                .and_then(|t| t.parse().ok())
                .map(Region::Unique)
                .ok_or_else(|| Error::Config(format!("unknown region label {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrefixMatrix {
    design: PrefixDesign,
    n_layers: usize,
    d_model: usize,
    rows: Arc<Tensor>,
    task_maps: Vec<Vec<usize>>,
    active: Vec<bool>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct PrefixHeader {
    version: u32,
    design: PrefixDesign,
    task_index_maps: Vec<Vec<usize>>,
    active_mask: Vec<bool>,
    dims: PrefixDims,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Debug)]
struct PrefixDims {
    rows: usize,
    row_dim: usize,
    n_layers: usize,
    d_model: usize,
}

impl PrefixMatrix {
    /// Fresh matrix with `N(0, 0.02²)` entries.
    pub fn new(design: PrefixDesign, config: &ModelConfig, seed: u64) -> Result<Self> {
        design.validate()?;
        config.validate()?;
        let total = design.total_rows();
        let dim = config.prefix_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, PREFIX_INIT_STD).expect("positive std");
        let data = (0..total * dim).map(|_| dist.sample(&mut rng)).collect();
        let task_maps = match design {
            PrefixDesign::Manual { n_tasks, .. } => (0..n_tasks)
                .map(|t| indices_for_task(&design, t))
                .collect::<Result<_>>()?,
            PrefixDesign::SelfAdaptive { n_tasks, .. } => vec![(0..total).collect(); n_tasks],
        };
        Ok(Self {
            design,
            n_layers: config.n_layers,
            d_model: config.d_model,
            rows: Arc::new(Tensor::new(vec![total, dim], data)?),
            task_maps,
            active: vec![true; total],
            trainable: true,
        })
    }

    pub fn design(&self) -> &PrefixDesign {
        &self.design
    }

    pub fn n_rows(&self) -> usize {
        self.active.len()
    }

    pub fn row_dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn rows_arc(&self) -> &Arc<Tensor> {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.rows)
    }

    pub fn task_map(&self, task: usize) -> Result<&[usize]> {
        self.task_maps
            .get(task)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Index(format!("no index map for task {task}")))
    }

    pub fn task_maps(&self) -> &[Vec<usize>] {
        &self.task_maps
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers
            || self.d_model != config.d_model
            || self.row_dim() != config.prefix_dim()
        {
            return Err(Error::Compatibility(format!(
                "prefix built for {} layers × d_model {}, model has {} × {}",
                self.n_layers, self.d_model, config.n_layers, config.d_model
            )));
        }
        Ok(())
    }

    /// Bind P_θ as a graph leaf named [`PREFIX_PARAM`].
    pub fn bind(&self, g: &mut Graph) -> Var {
        g.param(PREFIX_PARAM, &self.rows, self.trainable)
    }

    /// Gather `indices` from a bound leaf and slice them into per-layer,
    /// per-site key/value blocks. Gradients flow back only to those rows.
    pub fn gather_from(&self, g: &mut Graph, leaf: Var, indices: &[usize]) -> Result<PrefixActivations> {
        if indices.is_empty() {
            return Err(Error::Shape("cannot gather an empty prefix".into()));
        }
        for &r in indices {
            if r >= self.n_rows() {
                return Err(Error::Index(format!("prefix row {r} out of range ({} rows)", self.n_rows())));
            }
            if !self.active[r] {
                return Err(Error::MaskViolation { row: r });
            }
        }
        let picked = g.embedding(leaf, indices)?;
        let mut blocks = Vec::with_capacity(self.n_layers * Site::ALL.len());
        for layer in 0..self.n_layers {
            for site in Site::ALL {
                let base = ((layer * Site::ALL.len() + site as usize) * 2) * self.d_model;
                let k = g.narrow(picked, 1, base, self.d_model)?;
                let v = g.narrow(picked, 1, base + self.d_model, self.d_model)?;
                blocks.push((k, v));
            }
        }
        PrefixActivations::new(indices.len(), self.n_layers, blocks)
    }

    pub fn gather(&self, g: &mut Graph, indices: &[usize]) -> Result<PrefixActivations> {
        let leaf = self.bind(g);
        self.gather_from(g, leaf, indices)
    }

    pub fn view<'a>(&'a self, indices: &'a [usize]) -> PrefixView<'a> {
        PrefixView {
            matrix: self,
            indices,
        }
    }

    /// Fisher-driven selection: each task keeps its `top_n` highest-scoring
    /// rows (descending score, ties to the lower row); rows no task keeps
    /// become inactive.
    pub fn apply_selection(&mut self, reports: &[FisherReport], top_n: usize) -> Result<()> {
        let PrefixDesign::SelfAdaptive {
            init_len, n_tasks, ..
        } = self.design
        else {
            return Err(Error::Design("selection applies to self-adaptive designs only".into()));
        };
        if top_n == 0 || top_n > init_len {
            return Err(Error::Design(format!(
                "top_n {top_n} must be in 1..={init_len}"
            )));
        }
        if reports.len() != n_tasks {
            return Err(Error::Design(format!(
                "need one Fisher report per task ({n_tasks}), got {}",
                reports.len()
            )));
        }
        let mut maps = Vec::with_capacity(n_tasks);
        for (t, report) in reports.iter().enumerate() {
            if report.task_id != t {
                return Err(Error::Design(format!(
                    "report {t} belongs to task {}",
                    report.task_id
                )));
            }
            if report.scores.len() != init_len {
                return Err(Error::Design(format!(
                    "report for task {t} has {} scores, prefix has {init_len} rows",
                    report.scores.len()
                )));
            }
            if report.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::Numeric(format!("task {t} has invalid Fisher scores")));
            }
            maps.push(report.top_n(top_n));
        }
        let mut active = vec![false; init_len];
        for m in &maps {
            for &r in m {
                active[r] = true;
            }
        }
        self.task_maps = maps;
        self.active = active;
        Ok(())
    }

    /// Rows used for the target task: all rows for manual designs, the
    /// ascending union of the task maps otherwise.
    pub fn merge_for_target(&self) -> Vec<usize> {
        match self.design {
            PrefixDesign::Manual { .. } => (0..self.n_rows()).collect(),
            PrefixDesign::SelfAdaptive { .. } => self
                .task_maps
                .iter()
                .flatten()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        }
    }

    pub fn region_of(&self, row: usize) -> Region {
        if !self.active.get(row).copied().unwrap_or(false) {
            return Region::Inactive;
        }
        let users: Vec<usize> = self
            .task_maps
            .iter()
            .enumerate()
            .filter(|(_, m)| m.contains(&row))
            .map(|(t, _)| t)
            .collect();
        match users.len() {
            0 => Region::Inactive,
            n if n == self.task_maps.len() => Region::Shared,
            1 => Region::Unique(users[0]),
            _ => Region::Partial,
        }
    }

    /// `(shared, unique, partial, inactive)` row counts.
    pub fn split_counts(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for r in 0..self.n_rows() {
            match self.region_of(r) {
                Region::Shared => c.0 += 1,
                Region::Unique(_) => c.1 += 1,
                Region::Partial => c.2 += 1,
                Region::Inactive => c.3 += 1,
            }
        }
        c
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.rows.data() {
            h.update(x.to_le_bytes());
        }
        crate::tensor::hex_digest(h)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PrefixHeader {
            version: FORMAT_VERSION,
            design: self.design.clone(),
            task_index_maps: self.task_maps.clone(),
            active_mask: self.active.clone(),
            dims: PrefixDims {
                rows: self.n_rows(),
                row_dim: self.row_dim(),
                n_layers: self.n_layers,
                d_model: self.d_model,
            },
        };
        container::encode(PREFIX_MAGIC, &header, self.rows.data())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (PrefixHeader, Vec<f64>) = container::decode(PREFIX_MAGIC, bytes)?;
        if h.version != FORMAT_VERSION {
            return Err(Error::Load(format!("prefix format version {} unsupported", h.version)));
        }
        h.design.validate().map_err(|e| Error::Load(e.to_string()))?;
        let d = &h.dims;
        if d.rows != h.design.total_rows()
            || d.row_dim != d.n_layers * Site::ALL.len() * 2 * d.d_model
            || h.active_mask.len() != d.rows
            || h.task_index_maps.len() != h.design.n_tasks()
            || h.task_index_maps.iter().flatten().any(|&r| r >= d.rows)
        {
            return Err(Error::Load("inconsistent prefix header".into()));
        }
        if payload.len() != d.rows * d.row_dim {
            return Err(Error::Load(format!(
                "expected {} values, found {}",
                d.rows * d.row_dim,
                payload.len()
            )));
        }
        Ok(Self {
            rows: Arc::new(Tensor::new(vec![d.rows, d.row_dim], payload)?),
            n_layers: d.n_layers,
            d_model: d.d_model,
            design: h.design,
            task_maps: h.task_index_maps,
            active: h.active_mask,
            trainable: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A prefix matrix restricted to an ordered row list.
#[derive(Clone, Copy)]
pub struct PrefixView<'a> {
    pub matrix: &'a PrefixMatrix,
    pub indices: &'a [usize],
}

impl PrefixSource for PrefixView<'_> {
    fn activations(&self, g: &mut Graph, config: &ModelConfig) -> Result<Option<PrefixActivations>> {
        if self.indices.is_empty() {
            return Ok(None);
        }
        self.matrix.check_compatible(config)?;
        self.matrix.gather(g, self.indices).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ff: 2,
            vocab_size: 40,
            max_src_len: 4,
            max_tgt_len: 4,
        }
    }

    fn report(task_id: usize, scores: &[f64]) -> FisherReport {
        FisherReport {
            task_id,
            scores: scores.to_vec(),
        }
    }

    #[test]
    fn worked_example_maps() {
        let d = PrefixDesign::manual(2, 2, 2).unwrap();
        assert_eq!(indices_for_task(&d, 0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(indices_for_task(&d, 1).unwrap(), vec![0, 1, 4, 5]);
        assert!(matches!(indices_for_task(&d, 2), Err(Error::Index(_))));
        assert_eq!(d.total_rows(), 6);
    }

    #[test]
    fn degenerate_designs() {
        let concat = PrefixDesign::manual(0, 3, 2).unwrap();
        let a = indices_for_task(&concat, 0).unwrap();
        let b = indices_for_task(&concat, 1).unwrap();
        assert!(a.iter().all(|r| !b.contains(r)));
        let shared = PrefixDesign::manual(4, 0, 3).unwrap();
        let maps: Vec<_> = (0..3).map(|t| indices_for_task(&shared, t).unwrap()).collect();
        assert!(maps.iter().all(|m| m == &maps[0]));
        assert!(PrefixDesign::manual(0, 0, 2).is_err());
    }

    #[test]
    fn labels_split_unique_evenly() {
        let d = PrefixDesign::from_totals(10, 20, 2).unwrap();
        assert_eq!(
            d,
            PrefixDesign::Manual {
                shared: 20,
                unique_per_task: 5,
                n_tasks: 2
            }
        );
        assert_eq!(d.to_string(), "Unq(10)+Sha(20)");
        assert!(PrefixDesign::from_totals(5, 20, 2).is_err());
        assert_eq!(PrefixDesign::manual(40, 0, 2).unwrap().to_string(), "Sha(40)");
    }

    #[test]
    fn selection_by_hand() {
        let d = PrefixDesign::self_adaptive(4, 2, 2).unwrap();
        let mut p = PrefixMatrix::new(d, &cfg(), 0).unwrap();
        p.apply_selection(&[report(0, &[4., 3., 2., 1.]), report(1, &[1., 2., 3., 4.])], 2)
            .unwrap();
        assert_eq!(p.task_map(0).unwrap(), &[0, 1]);
        assert_eq!(p.task_map(1).unwrap(), &[3, 2]);
        assert_eq!(p.active_mask(), &[true; 4]);
        assert_eq!(p.merge_for_target(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn selection_ties_and_masking() {
        let d = PrefixDesign::self_adaptive(5, 2, 2).unwrap();
        let mut p = PrefixMatrix::new(d, &cfg(), 0).unwrap();
        let same = [1.0, 3.0, 3.0, 0.0, 3.0];
        p.apply_selection(&[report(0, &same), report(1, &same)], 2).unwrap();
        assert_eq!(p.task_map(0).unwrap(), &[1, 2]);
        assert_eq!(p.task_map(0).unwrap(), p.task_map(1).unwrap());
        assert_eq!(p.active_mask().iter().filter(|a| **a).count(), 2);
        let mut g = Graph::new();
        assert!(matches!(
            p.gather(&mut g, &[1, 4]),
            Err(Error::MaskViolation { row: 4 })
        ));
        assert!(p.apply_selection(&[report(0, &same), report(1, &same)], 6).is_err());
    }

    #[test]
    fn target_union_is_sorted() {
        let d = PrefixDesign::self_adaptive(6, 3, 2).unwrap();
        let mut p = PrefixMatrix::new(d, &cfg(), 0).unwrap();
        p.apply_selection(
            &[report(0, &[0., 5., 4., 3., 0., 0.]), report(1, &[0., 0., 1., 0., 9., 2.])],
            3,
        )
        .unwrap();
        assert_eq!(p.merge_for_target(), vec![1, 2, 3, 4, 5]);
        assert_eq!(p.region_of(2), Region::Shared);
        assert_eq!(p.region_of(1), Region::Unique(0));
        assert_eq!(p.region_of(0), Region::Inactive);
        let manual = PrefixMatrix::new(PrefixDesign::from_totals(10, 20, 2).unwrap(), &cfg(), 0).unwrap();
        assert_eq!(manual.merge_for_target(), (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn gather_order_and_gradient_locality() {
        let p = PrefixMatrix::new(PrefixDesign::manual(2, 2, 2).unwrap(), &cfg(), 3).unwrap();
        let mut g = Graph::new();
        let acts = p.gather(&mut g, &[3, 0]).unwrap();
        let (k, _) = acts.block(0, Site::EncoderSelf);
        assert_eq!(g.value(k).row(0), &p.rows().row(3)[..2]);
        assert_eq!(g.value(k).row(1), &p.rows().row(0)[..2]);
        let (_, v) = acts.block(0, Site::DecoderCross);
        let s = g.sum(v);
        let grads = g.backward(s).unwrap().param_grads();
        let gp = grads.get(PREFIX_PARAM).unwrap();
        for r in 0..6 {
            let touched = gp.row(r).iter().any(|x| *x != 0.0);
            assert_eq!(touched, r == 0 || r == 3, "row {r}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let d = PrefixDesign::self_adaptive(4, 2, 2).unwrap();
        let mut p = PrefixMatrix::new(d, &cfg(), 9).unwrap();
        p.apply_selection(&[report(0, &[0., 1., 2., 0.]), report(1, &[0., 3., 2., 0.])], 2)
            .unwrap();
        let bytes = p.to_bytes().unwrap();
        let q = PrefixMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(q.design(), p.design());
        assert_eq!(q.task_maps(), p.task_maps());
        assert_eq!(q.active_mask(), p.active_mask());
        assert_eq!(q.checksum(), p.checksum());
        assert_eq!(q.to_bytes().unwrap(), bytes);
        assert!(PrefixMatrix::from_bytes(&bytes[..20]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[16] = b'x';
        assert!(matches!(PrefixMatrix::from_bytes(&corrupt), Err(Error::Load(_))));
    }

    #[test]
    fn compatibility_check() {
        let p = PrefixMatrix::new(PrefixDesign::manual(2, 0, 1).unwrap(), &cfg(), 0).unwrap();
        let mut other = cfg();
        other.d_model = 4;
        other.n_heads = 2;
        assert!(matches!(p.check_compatible(&other), Err(Error::Compatibility(_))));
    }
}
