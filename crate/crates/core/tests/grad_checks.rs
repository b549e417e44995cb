use foleygen::dsp::StftParams;
use foleygen::encoder::{EncoderConfig, FeatureEncoder};
use foleygen::fslstm::{fslstm_loss, CellLayout, FsLstm, FsLstmConfig, LstmCell, LstmState, Mode, Zoneout};
use foleygen::matrix::Matrix;
use foleygen::synth::{align_frames_var, BankEntry, ClassSpectrogramBank};
use foleygen::tensor::{grad_check, keyed_rng, op_cases, BoundParams, Graph, ParamStore, Tensor, Var};
use foleygen::trn::{trn_loss, Trn, TrnConfig};
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = keyed_rng(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
}

/// Store values shifted by small seeded noise, so zero-initialized biases do
/// not leave relu units sitting exactly on their kink.
fn store_tensors(store: &ParamStore) -> Vec<Tensor> {
    store
        .iter()
        .enumerate()
        .map(|(i, (_, t))| {
            let shift = noise(t.shape(), 1000 + i as u64);
            let data = t.data().iter().zip(shift.data()).map(|(v, s)| v + 0.2 * s).collect();
            Tensor::new(t.shape(), data).unwrap()
        })
        .collect()
}

#[test]
fn every_registered_op_passes() {
    for case in op_cases() {
        let report = grad_check(case.build, &case.inputs, EPS, TOL).unwrap();
        assert!(report.passed, "{}: {report:?}", case.name);
    }
}

#[test]
fn single_fslstm_cell_step() {
    let mut store = ParamStore::new();
    let cell = LstmCell::new("c", 3, 4, 1.0, &mut store, &mut keyed_rng(1, &[])).unwrap();
    let np = store.len();
    let mut inputs = store_tensors(&store);
    inputs.push(noise(&[2, 3], 2));
    inputs.push(noise(&[2, 4], 3));
    inputs.push(noise(&[2, 4], 4));
    let zone = Zoneout::for_step(0.3, Mode::Train(11), [2, 4], &[0, 0]);
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let p = BoundParams::from_vars(v[..np].to_vec());
            let prev = LstmState {
                hidden: v[np + 1],
                cell: v[np + 2],
            };
            let next = cell.step(g, &p, prev, Some(v[np]), &zone)?;
            let both = g.concat(&[next.hidden, next.cell], 1)?;
            let w = g.constant(noise(&[8, 1], 5));
            let y = g.matmul(both, w)?;
            g.sum(y)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn toy_bank(frames: usize, bins: usize, classes: usize) -> ClassSpectrogramBank {
    ClassSpectrogramBank {
        entries: (0..classes)
            .map(|k| BankEntry {
                name: format!("class{k}"),
                clip_count: 1,
                mean: Matrix::from_fn(frames, bins, |t, b| 0.2 + 0.1 * ((t + 2 * b + k) % 5) as f64),
            })
            .collect(),
        params: StftParams::default(),
        sample_rate: 8000,
    }
}

fn check_full_fslstm_loss(layout: CellLayout) {
    let (steps, batch, classes, bins, bank_frames) = (4, 2, 3, 5, 6);
    let enc_cfg = EncoderConfig {
        height: 4,
        width: 4,
        in_channels: 3,
        widths: vec![2],
        output_dim: 3,
    };
    let cfg = FsLstmConfig {
        num_fast_cells: 3,
        input_dim: 3,
        hidden_dim: 4,
        num_classes: classes,
        residual_dim: bins,
        zoneout_prob: 0.2,
        dropout_prob: 0.1,
        forget_bias_init: 1.0,
        layout,
    };
    let mut store = ParamStore::new();
    let mut rng = keyed_rng(21, &[]);
    let encoder = FeatureEncoder::new(enc_cfg, "enc", &mut store, &mut rng).unwrap();
    let net = FsLstm::new(cfg, "net", &mut store, &mut rng).unwrap();
    let np = store.len();
    let bank = toy_bank(bank_frames, bins, classes);
    let targets: Vec<Matrix> = (0..batch)
        .map(|b| Matrix::from_fn(bank_frames, bins, |t, k| 0.3 + 0.05 * ((t * 3 + k + b) % 7) as f64))
        .collect();
    let labels = [2usize, 0];
    let mut inputs = store_tensors(&store);
    inputs.push(noise(&[steps * batch, 3, 4, 4], 22));
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let p = BoundParams::from_vars(v[..np].to_vec());
            let feats = encoder.encode(g, &p, v[np])?;
            let out = net.forward(g, &p, feats, batch, Mode::Train(3))?;
            let mut total = None;
            for b in 0..batch {
                let logits = out.clip_logits(g, b)?;
                let res = out.clip_residuals(g, b)?;
                let res = align_frames_var(g, res, bank_frames)?;
                let l = fslstm_loss(g, logits, res, labels[b], &targets[b], &bank, 0.5, 1.0)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(total.unwrap())
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{layout:?}: {report:?}");
}

#[test]
fn full_fslstm_loss_fast_slow() {
    check_full_fslstm_loss(CellLayout::FastSlow);
}

#[test]
fn full_fslstm_loss_simple_layout() {
    check_full_fslstm_loss(CellLayout::Simple);
}

#[test]
fn trn_loss_on_toy_dims() {
    let (frames, batch) = (5, 2);
    let cfg = TrnConfig {
        max_scale: 4,
        feature_dim: 3,
        hidden: 6,
        num_classes: 4,
        subsets_per_scale: 3,
        num_frames: frames,
        seed: 8,
    };
    let mut store = ParamStore::new();
    let trn = Trn::new(cfg, &mut store, &mut keyed_rng(31, &[])).unwrap();
    let np = store.len();
    let mut inputs = store_tensors(&store);
    inputs.push(noise(&[batch * frames, 3], 32));
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let p = BoundParams::from_vars(v[..np].to_vec());
            let scores = trn.forward(g, &p, v[np], batch)?;
            trn_loss(g, scores, &[1, 3])
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
