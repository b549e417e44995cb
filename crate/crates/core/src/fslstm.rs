//! Fast-Slow LSTM sequence network with a class head and a spectrogram
//! residual head.
//!
//! Sequences are processed in minibatches laid out time-major: a feature
//! matrix of shape `[T·B × input_dim]` holds row `t·B + b` for clip `b` at
//! timestep `t`. Outputs follow the same layout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::synth::{robust_energy_var, ClassSpectrogramBank};
use crate::tensor::{glorot_uniform, keyed_rng, orthogonal, BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Recurrent layout of the sequence network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLayout {
    /// `N` fast cells sharing one state plus a slow cell `U`.
    FastSlow,
    /// A single standard LSTM layer; the ablation baseline.
    Simple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsLstmConfig {
    pub num_fast_cells: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub residual_dim: usize,
    pub zoneout_prob: f64,
    pub dropout_prob: f64,
    pub forget_bias_init: f64,
    pub layout: CellLayout,
}

impl Default for FsLstmConfig {
    fn default() -> Self {
        Self {
            num_fast_cells: 4,
            input_dim: 128,
            hidden_dim: 32,
            num_classes: 12,
            residual_dim: 129,
            zoneout_prob: 0.1,
            dropout_prob: 0.1,
            forget_bias_init: 1.0,
            layout: CellLayout::FastSlow,
        }
    }
}

impl FsLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layout == CellLayout::FastSlow && self.num_fast_cells < 2 {
            return Err(Error::Config(format!(
                "fs-lstm needs at least 2 fast cells, got {}",
                self.num_fast_cells
            )));
        }
        let dims = [self.input_dim, self.hidden_dim, self.num_classes, self.residual_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("fs-lstm dimensions must be positive: {dims:?}")));
        }
        for (name, p) in [("zoneout_prob", self.zoneout_prob), ("dropout_prob", self.dropout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.dropout_prob >= 1.0 {
            return Err(Error::Config("dropout_prob must be below 1".into()));
        }
        Ok(())
    }
}

/// Whether stochastic regularizers sample masks or use their expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Masks are drawn from streams keyed by this value, the cell and the timestep.
    Train(u64),
    Eval,
}

/// Hidden and cell state, each `[B × H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden_dim: usize) -> Self {
        Self {
            hidden: g.constant(Tensor::zeros(&[batch, hidden_dim])),
            cell: g.constant(Tensor::zeros(&[batch, hidden_dim])),
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// One LSTM cell with per-gate layer normalization.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_x: Option<ParamId>,
    w_h: ParamId,
    ln_gain: [ParamId; 4],
    ln_bias: [ParamId; 4],
}

impl LstmCell {
    /// `input_dim = 0` builds a cell that only consumes its recurrent state.
    pub fn new(
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        forget_bias: f64,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h4 = 4 * hidden_dim;
        let w_x = if input_dim > 0 {
            let w = glorot_uniform(&[input_dim, h4], input_dim, h4, rng);
            Some(store.add(format!("{prefix}.w_x"), w)?)
        } else {
            None
        };
        let mut wh = Vec::with_capacity(hidden_dim * h4);
        let blocks: Vec<Tensor> = (0..4).map(|_| orthogonal(hidden_dim, hidden_dim, 1.0, rng)).collect();
        for r in 0..hidden_dim {
            for b in &blocks {
                wh.extend_from_slice(&b.data()[r * hidden_dim..(r + 1) * hidden_dim]);
            }
        }
        let w_h = store.add(format!("{prefix}.w_h"), Tensor::new(&[hidden_dim, h4], wh)?)?;
        let mut ln_gain = Vec::with_capacity(4);
        let mut ln_bias = Vec::with_capacity(4);
        for gate in GATES {
            ln_gain.push(store.add(format!("{prefix}.ln_{gate}.gain"), Tensor::filled(&[hidden_dim], 1.0))?);
            let b = if gate == "f" { forget_bias } else { 0.0 };
            ln_bias.push(store.add(format!("{prefix}.ln_{gate}.bias"), Tensor::filled(&[hidden_dim], b))?);
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            ln_gain: ln_gain.try_into().expect("four gates"),
            ln_bias: ln_bias.try_into().expect("four gates"),
        })
    }

    /// `input · W_x` for a whole stack of inputs at once.
    pub fn project_input(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<Var> {
        let w = self
            .w_x
            .ok_or_else(|| Error::invalid("cell was built without an input projection"))?;
        let s = g.shape(input);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape("lstm_cell_step", s, &[0, self.input_dim]));
        }
        g.matmul(input, p.var(w))
    }

    /// One step from `prev` given an already projected input (`[B × 4H]`).
    pub fn step_projected(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prev: LstmState,
        input_proj: Option<Var>,
        zoneout: &Zoneout,
    ) -> Result<LstmState> {
        let h = self.hidden_dim;
        let sh = g.shape(prev.hidden).to_vec();
        if sh.len() != 2 || sh[1] != h || g.shape(prev.cell) != sh.as_slice() {
            return Err(Error::shape("lstm_cell_step", &sh, &[0, h]));
        }
        let mut pre = g.matmul(prev.hidden, p.var(self.w_h))?;
        match (input_proj, self.w_x) {
            (Some(x), Some(_)) => pre = g.add(pre, x)?,
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("input given to a cell without input weights")),
            (None, Some(_)) => return Err(Error::invalid("cell expects an input")),
        }
        let mut gates = [pre; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let s = g.slice(pre, 1, k * h, h)?;
            *gate = g.layer_norm(s, p.var(self.ln_gain[k]), p.var(self.ln_bias[k]))?;
        }
        let i = g.sigmoid(gates[0])?;
        let f = g.sigmoid(gates[1])?;
        let cand = g.tanh(gates[2])?;
        let o = g.sigmoid(gates[3])?;
        let kept = g.mul(f, prev.cell)?;
        let written = g.mul(i, cand)?;
        let cell = g.add(kept, written)?;
        let squashed = g.tanh(cell)?;
        let hidden = g.mul(o, squashed)?;
        Ok(LstmState {
            hidden: zoneout.apply(g, prev.hidden, hidden, 0)?,
            cell: zoneout.apply(g, prev.cell, cell, 1)?,
        })
    }

    /// `lstm_cell_step`: one step from `prev`, consuming `input` (`[B × input_dim]`) if present.
    pub fn step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        prev: LstmState,
        input: Option<Var>,
        zoneout: &Zoneout,
    ) -> Result<LstmState> {
        let proj = match input {
            Some(x) => Some(self.project_input(g, p, x)?),
            None => None,
        };
        self.step_projected(g, p, prev, proj, zoneout)
    }
}

/// Zoneout applied to a state carry: `m ⊙ prev + (1 − m) ⊙ new`.
#[derive(Debug, Clone)]
pub enum Zoneout {
    Off,
    /// Deterministic expectation with keep-probability `p`.
    Expected(f64),
    /// Sampled Bernoulli masks for hidden (`0`) and cell (`1`) carries.
    Masks([Tensor; 2]),
}

impl Zoneout {
    pub fn for_step(prob: f64, mode: Mode, shape: [usize; 2], path: &[u64]) -> Self {
        if prob == 0.0 {
            return Zoneout::Off;
        }
        match mode {
            Mode::Eval => Zoneout::Expected(prob),
            Mode::Train(key) => {
                let mut rng = keyed_rng(key, path);
                let n = shape[0] * shape[1];
                let mut draw = || {
                    let v = (0..n)
                        .map(|_| if rng.random::<f64>() < prob { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::new(&shape, v).expect("mask shape")
                };
                let h = draw();
                let c = draw();
                Zoneout::Masks([h, c])
            }
        }
    }

    fn apply(&self, g: &mut Graph, prev: Var, new: Var, which: usize) -> Result<Var> {
        match self {
            Zoneout::Off => Ok(new),
            Zoneout::Expected(p) => {
                let a = g.scale(prev, *p)?;
                let b = g.scale(new, 1.0 - p)?;
                g.add(a, b)
            }
            Zoneout::Masks(masks) => {
                let m = &masks[which];
                let inv = Tensor::new(m.shape(), m.data().iter().map(|v| 1.0 - v).collect())?;
                let m = g.constant(m.clone());
                let inv = g.constant(inv);
                let a = g.mul(m, prev)?;
                let b = g.mul(inv, new)?;
                g.add(a, b)
            }
        }
    }
}

/// Per-timestep outputs, time-major `[T·B × ·]`.
#[derive(Debug, Clone, Copy)]
pub struct SequenceOutput {
    pub steps: usize,
    pub batch: usize,
    pub logits: Var,
    pub residuals: Var,
}

impl SequenceOutput {
    fn clip_rows(&self, g: &mut Graph, v: Var, clip: usize) -> Result<Var> {
        if clip >= self.batch {
            return Err(Error::invalid(format!("clip {clip} out of batch of {}", self.batch)));
        }
        let cols = g.shape(v)[1];
        let wide = g.reshape(v, &[self.steps, self.batch * cols])?;
        g.slice(wide, 1, clip * cols, cols)
    }

    /// `[T × num_classes]` logits of one clip.
    pub fn clip_logits(&self, g: &mut Graph, clip: usize) -> Result<Var> {
        self.clip_rows(g, self.logits, clip)
    }

    /// `[T × residual_dim]` residual frames of one clip.
    pub fn clip_residuals(&self, g: &mut Graph, clip: usize) -> Result<Var> {
        self.clip_rows(g, self.residuals, clip)
    }

    /// Mean over timesteps of every clip's logits, `[B × num_classes]`.
    pub fn pooled_logits(&self, g: &mut Graph) -> Result<Var> {
        let c = g.shape(self.logits)[1];
        let wide = g.reshape(self.logits, &[self.steps, self.batch * c])?;
        let mean = g.mean_axis0(wide)?;
        g.reshape(mean, &[self.batch, c])
    }
}

#[derive(Debug, Clone)]
pub struct FsLstm {
    pub config: FsLstmConfig,
    fast: Vec<LstmCell>,
    slow: Option<LstmCell>,
    class_w: ParamId,
    class_b: ParamId,
    res_w: ParamId,
    res_b: ParamId,
}

impl FsLstm {
    pub fn new(config: FsLstmConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (h, fb) = (config.hidden_dim, config.forget_bias_init);
        let mut fast = vec![LstmCell::new(
            &format!("{prefix}.fast0"),
            config.input_dim,
            h,
            fb,
            store,
            rng,
        )?];
        let slow = match config.layout {
            CellLayout::Simple => None,
            CellLayout::FastSlow => {
                let slow = LstmCell::new(&format!("{prefix}.slow"), h, h, fb, store, rng)?;
                fast.push(LstmCell::new(&format!("{prefix}.fast1"), h, h, fb, store, rng)?);
                for i in 2..config.num_fast_cells {
                    fast.push(LstmCell::new(&format!("{prefix}.fast{i}"), 0, h, fb, store, rng)?);
                }
                Some(slow)
            }
        };
        let class_w = store.add(
            format!("{prefix}.class.w"),
            glorot_uniform(&[h, config.num_classes], h, config.num_classes, rng),
        )?;
        let class_b = store.add(format!("{prefix}.class.b"), Tensor::zeros(&[config.num_classes]))?;
        let res_w = store.add(
            format!("{prefix}.residual.w"),
            glorot_uniform(&[h, config.residual_dim], h, config.residual_dim, rng),
        )?;
        let res_b = store.add(format!("{prefix}.residual.b"), Tensor::zeros(&[config.residual_dim]))?;
        Ok(Self {
            config,
            fast,
            slow,
            class_w,
            class_b,
            res_w,
            res_b,
        })
    }

    pub fn fast_cells(&self) -> &[LstmCell] {
        &self.fast
    }

    pub fn slow_cell(&self) -> Option<&LstmCell> {
        self.slow.as_ref()
    }

    /// Parameter ids of the class head `(w, b)` and residual head `(w, b)`.
    pub fn head_params(&self) -> [(ParamId, ParamId); 2] {
        [(self.class_w, self.class_b), (self.res_w, self.res_b)]
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: Mode, tag: u64) -> Result<Var> {
        match mode {
            Mode::Train(key) if self.config.dropout_prob > 0.0 => {
                let mut rng = keyed_rng(key, &[u64::MAX, tag]);
                g.dropout_mask(x, self.config.dropout_prob, &mut rng)
            }
            _ => Ok(x),
        }
    }

    /// `fslstm_forward` over `features: [T·B × input_dim]` (time-major).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        features: Var,
        batch: usize,
        mode: Mode,
    ) -> Result<SequenceOutput> {
        let cfg = &self.config;
        let s = g.shape(features).to_vec();
        if batch == 0 || s.len() != 2 || s[1] != cfg.input_dim || !s[0].is_multiple_of(batch) || s[0] == 0 {
            return Err(Error::shape("fslstm_forward", &s, &[batch, cfg.input_dim]));
        }
        let steps = s[0] / batch;
        let h = cfg.hidden_dim;
        let shape = [batch, h];
        let x = self.dropout(g, features, mode, 0)?;
        let projected = self.fast[0].project_input(g, p, x)?;
        let mut fast = LstmState::zeros(g, batch, h);
        let mut slow = LstmState::zeros(g, batch, h);
        let mut tops = Vec::with_capacity(steps);
        let zp = cfg.zoneout_prob;
        for t in 0..steps {
            let xt = g.slice(projected, 0, t * batch, batch)?;
            let z = |cell: u64| Zoneout::for_step(zp, mode, shape, &[cell, t as u64]);
            fast = self.fast[0].step_projected(g, p, fast, Some(xt), &z(0))?;
            if let Some(u) = &self.slow {
                slow = u.step(g, p, slow, Some(fast.hidden), &z(100))?;
                fast = self.fast[1].step(g, p, fast, Some(slow.hidden), &z(1))?;
                for (i, cell) in self.fast.iter().enumerate().skip(2) {
                    fast = cell.step(g, p, fast, None, &z(i as u64))?;
                }
            }
            tops.push(fast.hidden);
        }
        let top = g.concat(&tops, 0)?;
        let top = self.dropout(g, top, mode, 1)?;
        let logits = g.affine(top, p.var(self.class_w), p.var(self.class_b))?;
        let residuals = g.affine(top, p.var(self.res_w), p.var(self.res_b))?;
        Ok(SequenceOutput {
            steps,
            batch,
            logits,
            residuals,
        })
    }
}

/// Cross-entropy of mean-pooled `logits: [T × C]` plus `λ · E(residual + A_K, target)`.
///
/// `residual` must already be aligned to the bank's frame count.
#[allow(clippy::too_many_arguments)]
pub fn fslstm_loss(
    g: &mut Graph,
    logits: Var,
    residual: Var,
    class: usize,
    target_sqrt: &Matrix,
    bank: &ClassSpectrogramBank,
    lambda: f64,
    alpha: f64,
) -> Result<Var> {
    let base = bank.base(class)?;
    let rs = g.shape(residual).to_vec();
    if rs != [target_sqrt.rows(), target_sqrt.cols()] || base.shape() != target_sqrt.shape() {
        return Err(Error::Alignment(format!(
            "residual {rs:?}, target {:?}, base {:?}",
            target_sqrt.shape(),
            base.shape()
        )));
    }
    let pooled = g.mean_axis0(logits)?;
    let ce = g.cross_entropy(pooled, class)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let base = g.constant(Tensor::new(&rs, base.as_slice().to_vec())?);
    let target = g.constant(Tensor::new(&rs, target_sqrt.as_slice().to_vec())?);
    let pred = g.add(residual, base)?;
    let energy = robust_energy_var(g, pred, target, alpha)?;
    let weighted = g.scale(energy, lambda)?;
    g.add(ce, weighted)
}
