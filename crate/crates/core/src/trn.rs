use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, keyed_rng, BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrnConfig {
    pub max_scale: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub subsets_per_scale: usize,
    pub num_frames: usize,
    pub seed: u64,
}

impl Default for TrnConfig {
    fn default() -> Self {
        Self {
            max_scale: 8,
            feature_dim: 128,
            hidden: 256,
            num_classes: 12,
            subsets_per_scale: 8,
            num_frames: 8,
            seed: 0,
        }
    }
}

impl TrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_scale < 2 {
            return Err(Error::Config(format!(
                "max_scale must be at least 2, got {}",
                self.max_scale
            )));
        }
        if self.max_scale > self.num_frames {
            return Err(Error::Config(format!(
                "max_scale {} exceeds the {} sampled frames; lower the scale or sample more frames",
                self.max_scale, self.num_frames
            )));
        }
        if self.subsets_per_scale == 0 || self.feature_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("trn dimensions and subset cap must be positive".into()));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let q = c.len();
    let Some(i) = (0..q).rev().find(|&i| c[i] < n - q + i) else {
        return false;
    };
    c[i] += 1;
    for j in i + 1..q {
        c[j] = c[j - 1] + 1;
    }
    true
}

/// Strictly increasing `q`-tuples drawn from `0..r`, in lexicographic order.
///
/// All `C(r, q)` tuples are returned when that count fits under `cap`;
/// otherwise `cap` distinct tuples are sampled from a stream keyed by
/// `(seed, r, q)`.
pub fn select_ordered_subsets(r: usize, q: usize, cap: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if q == 0 || q > r {
        return Err(Error::invalid(format!("cannot choose {q} of {r} frames")));
    }
    if cap == 0 {
        return Err(Error::invalid("subset cap must be positive"));
    }
    let exhaustive = binomial(r, q).is_some_and(|n| n <= cap);
    let mut out = Vec::new();
    if exhaustive {
        let mut c: Vec<usize> = (0..q).collect();
        loop {
            out.push(c.clone());
            if !next_combination(&mut c, r) {
                break;
            }
        }
        return Ok(out);
    }
    let mut rng = keyed_rng(seed, &[r as u64, q as u64]);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < cap {
        let mut c = sample(&mut rng, r, q).into_vec();
        c.sort_unstable();
        seen.insert(c);
    }
    out.extend(seen);
    Ok(out)
}

/// Relation module for one scale: `h(Σ g(concat f_subset))`.
#[derive(Debug, Clone)]
pub struct RelationScale {
    pub q: usize,
    pub subsets: Vec<Vec<usize>>,
    g1: (ParamId, ParamId),
    g2: (ParamId, ParamId),
    h: (ParamId, ParamId),
}

impl RelationScale {
    pub fn new(q: usize, config: &TrnConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let subsets = select_ordered_subsets(config.num_frames, q, config.subsets_per_scale, config.seed)?;
        let (d, hid, c) = (config.feature_dim * q, config.hidden, config.num_classes);
        let mut layer = |name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
            let w = store.add(format!("trn.q{q}.{name}.w"), glorot_uniform(&[i, o], i, o, rng))?;
            let b = store.add(format!("trn.q{q}.{name}.b"), Tensor::zeros(&[o]))?;
            Ok((w, b))
        };
        let g1 = layer("g1", d, hid)?;
        let g2 = layer("g2", hid, hid)?;
        let h = layer("h", hid, c)?;
        Ok(Self { q, subsets, g1, g2, h })
    }

    /// Summed `g` activations for every clip, `[B × hidden]`, before `h`.
    pub fn pooled_relations(&self, g: &mut Graph, p: &BoundParams, features: Var, batch: usize) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if batch == 0 || s.len() != 2 || !s[0].is_multiple_of(batch) {
            return Err(Error::shape("relation_scale_forward", &s, &[batch, 0]));
        }
        let r = s[0] / batch;
        if self.q > r || self.subsets.iter().flatten().any(|&i| i >= r) {
            return Err(Error::invalid(format!("scale {} needs more than {r} frames", self.q)));
        }
        let n = self.subsets.len();
        let mut parts = Vec::with_capacity(self.q);
        for k in 0..self.q {
            let mut sel = vec![0.0; batch * n * batch * r];
            for b in 0..batch {
                for (j, subset) in self.subsets.iter().enumerate() {
                    sel[(b * n + j) * batch * r + b * r + subset[k]] = 1.0;
                }
            }
            let sel = g.constant(Tensor::new(&[batch * n, batch * r], sel)?);
            parts.push(g.matmul(sel, features)?);
        }
        let joined = g.concat(&parts, 1)?;
        let a = g.affine(joined, p.var(self.g1.0), p.var(self.g1.1))?;
        let a = g.relu(a)?;
        let a = g.affine(a, p.var(self.g2.0), p.var(self.g2.1))?;
        let a = g.relu(a)?;
        let mut pool = vec![0.0; batch * batch * n];
        for b in 0..batch {
            for j in 0..n {
                pool[b * batch * n + b * n + j] = 1.0;
            }
        }
        let pool = g.constant(Tensor::new(&[batch, batch * n], pool)?);
        g.matmul(pool, a)
    }

    /// `relation_scale_forward`: class scores `[B × C]` for `features: [B·r × D]` (clip-major).
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, features: Var, batch: usize) -> Result<Var> {
        let pooled = self.pooled_relations(g, p, features, batch)?;
        g.affine(pooled, p.var(self.h.0), p.var(self.h.1))
    }
}

#[derive(Debug, Clone)]
pub struct Trn {
    pub config: TrnConfig,
    pub scales: Vec<RelationScale>,
}

impl Trn {
    pub fn new(config: TrnConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let scales = (2..=config.max_scale)
            .map(|q| RelationScale::new(q, &config, store, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, scales })
    }

    /// `trn_multiscale_forward`: `Σ_{q=2..Q} R_q`, summed in ascending `q`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, features: Var, batch: usize) -> Result<Var> {
        self.forward_upto(g, p, features, batch, self.config.max_scale)
    }

    /// Partial sum `Σ_{q=2..upto} R_q`.
    pub fn forward_upto(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        features: Var,
        batch: usize,
        upto: usize,
    ) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.config.feature_dim || batch == 0 || !s[0].is_multiple_of(batch) {
            return Err(Error::shape(
                "trn_multiscale_forward",
                &s,
                &[batch, self.config.feature_dim],
            ));
        }
        let r = s[0] / batch;
        if r < upto {
            return Err(Error::invalid(format!(
                "{r} frames cannot support relations up to scale {upto}; use a smaller Q"
            )));
        }
        let mut total: Option<Var> = None;
        for scale in self.scales.iter().filter(|sc| sc.q <= upto) {
            let y = scale.forward(g, p, features, batch)?;
            total = Some(match total {
                Some(t) => g.add(t, y)?,
                None => y,
            });
        }
        total.ok_or_else(|| Error::invalid("no relation scales below the requested bound"))
    }
}

/// `trn_loss`: mean softmax cross-entropy of `scores: [B × C]`.
pub fn trn_loss(g: &mut Graph, scores: Var, classes: &[usize]) -> Result<Var> {
    g.cross_entropy_rows(scores, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(r: usize, q: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for mask in 0u32..(1 << r) {
            if mask.count_ones() as usize == q {
                out.push((0..r).filter(|i| mask & (1 << i) != 0).collect());
            }
        }
        out.sort();
        out
    }

    #[test]
    fn small_enumerations() {
        assert_eq!(
            select_ordered_subsets(3, 2, 3, 0).unwrap(),
            vec![vec![0, 1], vec![0, 2], vec![1, 2]]
        );
        assert_eq!(
            select_ordered_subsets(8, 8, 1, 0).unwrap(),
            vec![(0..8).collect::<Vec<_>>()]
        );
        for q in 1..=6 {
            assert_eq!(select_ordered_subsets(6, q, 100, 0).unwrap(), brute(6, q));
        }
    }

    #[test]
    fn sampled_subsets_are_distinct_increasing_and_seeded() {
        let a = select_ordered_subsets(20, 4, 16, 3).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|t| t.windows(2).all(|w| w[0] < w[1])));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, select_ordered_subsets(20, 4, 16, 3).unwrap());
        assert_ne!(a, select_ordered_subsets(20, 4, 16, 4).unwrap());
    }

    #[test]
    fn too_large_scale_is_rejected() {
        assert!(matches!(
            select_ordered_subsets(3, 4, 8, 0),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = TrnConfig {
            num_frames: 4,
            ..TrnConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    fn toy(q: usize, r: usize) -> (TrnConfig, ParamStore, Trn) {
        let cfg = TrnConfig {
            max_scale: q,
            feature_dim: 3,
            hidden: 5,
            num_classes: 4,
            subsets_per_scale: 4,
            num_frames: r,
            seed: 1,
        };
        let mut store = ParamStore::new();
        let trn = Trn::new(cfg.clone(), &mut store, &mut keyed_rng(2, &[])).unwrap();
        (cfg, store, trn)
    }

    fn feats(g: &mut Graph, rows: usize, dim: usize) -> Var {
        let mut rng = keyed_rng(9, &[]);
        let v = (0..rows * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        g.constant(Tensor::new(&[rows, dim], v).unwrap())
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let (_, mut store, trn) = toy(3, 5);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = feats(&mut g, 5, 3);
        let s = trn.forward(&mut g, &p, f, 1).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let loss = trn_loss(&mut g, s, &[2]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn multiscale_is_additive_over_scales() {
        let (_, store, trn) = toy(4, 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = feats(&mut g, 12, 3);
        let upto3 = trn.forward_upto(&mut g, &p, f, 2, 3).unwrap();
        let all = trn.forward(&mut g, &p, f, 2).unwrap();
        let last = trn.scales[2].forward(&mut g, &p, f, 2).unwrap();
        for ((a, b), c) in g
            .value(all)
            .data()
            .iter()
            .zip(g.value(upto3).data())
            .zip(g.value(last).data())
        {
            assert_eq!(*a, b + c);
        }
        let q2 = trn.forward_upto(&mut g, &p, f, 2, 2).unwrap();
        let alone = trn.scales[0].forward(&mut g, &p, f, 2).unwrap();
        assert_eq!(g.value(q2).data(), g.value(alone).data());
    }

    #[test]
    fn duplicating_subsets_doubles_relation_sum() {
        let (_, store, trn) = toy(2, 5);
        let mut twice = trn.scales[0].clone();
        let dup = twice.subsets.clone();
        twice.subsets.extend(dup);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = feats(&mut g, 5, 3);
        let a = trn.scales[0].pooled_relations(&mut g, &p, f, 1).unwrap();
        let b = twice.pooled_relations(&mut g, &p, f, 1).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent_clips() {
        let (_, store, trn) = toy(3, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = feats(&mut g, 8, 3);
        let both = trn.forward(&mut g, &p, f, 2).unwrap();
        let second = g.slice(f, 0, 4, 4).unwrap();
        let one = trn.forward(&mut g, &p, second, 1).unwrap();
        let row = g.row(both, 1).unwrap();
        for (x, y) in g.value(row).data().iter().zip(g.value(one).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_frames_is_invalid() {
        let (_, store, trn) = toy(3, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = feats(&mut g, 2, 3);
        assert!(matches!(trn.forward(&mut g, &p, f, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn loss_rejects_bad_class() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 12]));
        let uniform = trn_loss(&mut g, s, &[0]).unwrap();
        assert!((g.value(uniform).item() - 12f64.ln()).abs() < 1e-12);
        assert!(matches!(trn_loss(&mut g, s, &[12]), Err(Error::InvalidArgument(_))));
        let big = g.constant(Tensor::new(&[1, 3], vec![1000.0, 0.0, 0.0]).unwrap());
        let confident = trn_loss(&mut g, big, &[0]).unwrap();
        assert!(g.value(confident).item() < 1e-300);
    }
}
