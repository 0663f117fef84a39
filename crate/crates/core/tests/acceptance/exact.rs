//! Criteria checked against finite differences, brute-force oracles and
//! invariants.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rationale_lab::data::Example;
use rationale_lab::encoder::{ModelConfig, TokenBatch};
use rationale_lab::eval::{majority_baseline, token_prf};
use rationale_lab::rnp::{omega_regularizer, rnp_objective, RnpConfig, RnpModel};
use rationale_lab::tensor::gradcheck::max_relative_error;
use rationale_lab::tensor::params::Bindings;
use rationale_lab::tensor::{BinaryMask, ParamStore, Tape, Tensor, Var};
use rationale_lab::yofo::loss::{contiguity_tape, sparsity_final_tape, sparsity_layerwise_tape};
use rationale_lab::yofo::train::objective;
use rationale_lab::yofo::{
    contiguity, make_length_config, sparsity_final, sparsity_layerwise, DecayMode, GateConfig,
    GateMode, LossMode, YofoModel,
};
use rationale_lab::Result;

use crate::Outcome;

const H: f64 = 1e-5;
/// Composed objectives have parameters with gradients near 1e-7, where the
/// rounding noise of a 1e-5 step is already 1e-4 relative.
const H_COMPOSED: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const TRIALS: u64 = 20;
const MODES: [DecayMode; 4] = [
    DecayMode::Cliff,
    DecayMode::Linear,
    DecayMode::Exponential,
    DecayMode::Logarithmic,
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fixed random linear readout of every output element.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type OpCheck = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", |rng, t| {
            let (m, k, n) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            let inputs = [rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                readout(tp, y, t)
            })
        }),
        ("linear", |rng, t| {
            let (m, k, n) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            let inputs = [
                rand_tensor(rng, &[m, k]),
                rand_tensor(rng, &[k, n]),
                rand_tensor(rng, &[n]),
            ];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                readout(tp, y, t)
            })
        }),
        ("add", |rng, t| {
            let n = rng.random_range(1..9);
            let inputs = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.add(v[0], v[1])?;
                readout(tp, y, t)
            })
        }),
        ("sub", |rng, t| {
            let n = rng.random_range(1..9);
            let inputs = [rand_tensor(rng, &[n]), rand_tensor(rng, &[n])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.sub(v[0], v[1])?;
                readout(tp, y, t)
            })
        }),
        ("mul", |rng, t| {
            let (r, c) = (rng.random_range(1..4), rng.random_range(1..5));
            let inputs = [rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.mul(v[0], v[1])?;
                readout(tp, y, t)
            })
        }),
        ("add_scalar", |rng, t| {
            let inputs = [{
                let n = rng.random_range(1..9);
                rand_tensor(rng, &[n])
            }];
            let c = rng.random_range(-2.0..2.0);
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.add_scalar(v[0], c);
                let y = tp.mul(y, y)?;
                readout(tp, y, t)
            })
        }),
        ("scale", |rng, t| {
            let inputs = [{
                let n = rng.random_range(1..9);
                rand_tensor(rng, &[n])
            }];
            let c = rng.random_range(-2.0..2.0);
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.scale(v[0], c);
                readout(tp, y, t)
            })
        }),
        ("abs", |rng, t| {
            let inputs = [{
                let n = rng.random_range(1..9);
                away_from_zero(rng, &[n])
            }];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.abs(v[0]);
                readout(tp, y, t)
            })
        }),
        ("sum", |rng, _| {
            let inputs = [{
                let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
                rand_tensor(rng, &[a, b])
            }];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.mul(v[0], v[0])?;
                Ok(tp.sum(y))
            })
        }),
        ("mean", |rng, _| {
            let inputs = [{
                let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
                rand_tensor(rng, &[a, b])
            }];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.mul(v[0], v[0])?;
                Ok(tp.mean(y))
            })
        }),
        ("gelu", |rng, t| {
            let mut x = {
                let n = rng.random_range(1..9);
                rand_tensor(rng, &[n])
            };
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            max_relative_error(&[x], H, |tp, v| {
                let y = tp.gelu(v[0]);
                readout(tp, y, t)
            })
        }),
        ("layer_norm", |rng, t| {
            let (r, d) = (rng.random_range(1..4), rng.random_range(2..7));
            let inputs = [
                rand_tensor(rng, &[r, d]),
                rand_tensor(rng, &[d]),
                rand_tensor(rng, &[d]),
            ];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.layer_norm(v[0], v[1], v[2])?;
                readout(tp, y, t)
            })
        }),
        ("dropout", |rng, t| {
            let inputs = [{
                let (a, b) = (rng.random_range(1..4), rng.random_range(1..6));
                rand_tensor(rng, &[a, b])
            }];
            max_relative_error(&inputs, H, |tp, v| {
                let mut r = ChaCha8Rng::seed_from_u64(t);
                let y = tp.dropout(v[0], 0.3, &mut r)?;
                readout(tp, y, t)
            })
        }),
        ("embedding", |rng, t| {
            let (v, d, n) = (
                rng.random_range(2..6),
                rng.random_range(1..4),
                rng.random_range(1..7),
            );
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let inputs = [rand_tensor(rng, &[v, d])];
            max_relative_error(&inputs, H, |tp, x| {
                let y = tp.embedding(x[0], &ids)?;
                readout(tp, y, t)
            })
        }),
        ("gather_rows", |rng, t| {
            let (r, d) = (rng.random_range(1..6), rng.random_range(1..4));
            let idx: Vec<usize> = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(0..r))
                .collect();
            let inputs = [rand_tensor(rng, &[r, d])];
            max_relative_error(&inputs, H, |tp, x| {
                let y = tp.gather_rows(x[0], &idx)?;
                readout(tp, y, t)
            })
        }),
        ("split_heads/merge_heads", |rng, t| {
            let (b, l, heads, dh) = (
                rng.random_range(1..3),
                rng.random_range(1..5),
                rng.random_range(1..3),
                rng.random_range(1..4),
            );
            let inputs = [rand_tensor(rng, &[b * l, heads * dh])];
            max_relative_error(&inputs, H, |tp, x| {
                let s = tp.split_heads(x[0], b, l, heads)?;
                let w = readout(tp, s, t)?;
                let s2 = tp.mul(s, s)?;
                let m = tp.merge_heads(s2, b, l, heads)?;
                let r = readout(tp, m, t + 1)?;
                tp.add(w, r)
            })
        }),
        ("bmm", |rng, t| {
            let (g, m, k, n) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            let alpha = rng.random_range(0.2..2.0);
            let inputs = [
                rand_tensor(rng, &[g, m, k]),
                rand_tensor(rng, &[g, k, n]),
                rand_tensor(rng, &[g, n, k]),
            ];
            max_relative_error(&inputs, H, |tp, x| {
                let a = tp.bmm(x[0], x[1], false, alpha)?;
                let b = tp.bmm(x[0], x[2], true, alpha)?;
                let s = tp.add(a, b)?;
                readout(tp, s, t)
            })
        }),
        ("masked_softmax (scores, soft keep)", |rng, t| {
            let (b, h, r, l) = (
                rng.random_range(1..3),
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(2..6),
            );
            let scores = rand_tensor(rng, &[b * h, r, l]);
            let keep = Tensor::new(
                vec![b, l],
                (0..b * l).map(|_| rng.random_range(0.1..1.0)).collect(),
            )
            .unwrap();
            max_relative_error(&[scores, keep], H, |tp, v| {
                let p = tp.masked_softmax(v[0], v[1])?;
                readout(tp, p, t)
            })
        }),
        ("masked_softmax (scores, binary keep)", |rng, t| {
            let (b, l) = (rng.random_range(1..3), rng.random_range(2..7));
            let mut keep: Vec<f64> = (0..b * l)
                .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
                .collect();
            for row in keep.chunks_mut(l) {
                row[0] = 1.0;
            }
            let keep = Tensor::new(vec![b, l], keep).unwrap();
            let inputs = [rand_tensor(rng, &[b * 2, 3, l])];
            max_relative_error(&inputs, H, |tp, v| {
                let k = tp.constant(keep.clone());
                let p = tp.masked_softmax(v[0], k)?;
                readout(tp, p, t)
            })
        }),
        ("cross_entropy", |rng, _| {
            let n = rng.random_range(1..7);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let inputs = [rand_tensor(rng, &[n, 2])];
            max_relative_error(&inputs, H, |tp, v| tp.cross_entropy(v[0], &labels))
        }),
        ("tempered_keep_prob", |rng, t| {
            let rows = rng.random_range(1..8);
            let noise: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tau = rng.random_range(0.3..2.0);
            let inputs = [rand_tensor(rng, &[rows, 2])];
            max_relative_error(&inputs, H, |tp, v| {
                let p = tp.tempered_keep_prob(v[0], &noise, tau)?;
                readout(tp, p, t)
            })
        }),
        ("force_first_col", |rng, t| {
            let inputs = [{
                let (a, b) = (rng.random_range(1..4), rng.random_range(2..6));
                rand_tensor(rng, &[a, b])
            }];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.force_first_col(v[0]);
                let y = tp.mul(y, v[0])?;
                readout(tp, y, t)
            })
        }),
        ("reshape", |rng, t| {
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            let inputs = [rand_tensor(rng, &[a * b])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.reshape(v[0], vec![a, b])?;
                let y = tp.mul(y, y)?;
                readout(tp, y, t)
            })
        }),
        ("segment_mean", |rng, t| {
            let (b, l) = (rng.random_range(1..4), rng.random_range(1..7));
            let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=l)).collect();
            let inputs = [rand_tensor(rng, &[b, l])];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.segment_mean(v[0], &lens)?;
                readout(tp, y, t)
            })
        }),
        ("row_variation", |rng, t| {
            let (b, l) = (rng.random_range(1..4), rng.random_range(2..7));
            let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=l)).collect();
            // Strictly increasing rows keep every difference away from the kink.
            let data: Vec<f64> = (0..b * l)
                .map(|i| (i % l) as f64 * 0.3 + rng.random_range(0.0..0.1))
                .collect();
            let inputs = [Tensor::new(vec![b, l], data).unwrap()];
            max_relative_error(&inputs, H, |tp, v| {
                let y = tp.row_variation(v[0], &lens)?;
                readout(tp, y, t)
            })
        }),
        ("composed skimming objective", composed_yofo),
        ("composed generate-then-predict objective", composed_rnp),
    ]
}

fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 12,
        max_len: 8,
        dropout: 0.0,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, max_rows: usize, max_len: usize) -> (TokenBatch, Vec<usize>) {
    let rows = rng.random_range(1..=max_rows);
    let seqs: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let n = rng.random_range(1..=max_len);
            (0..n).map(|_| rng.random_range(3..12)).collect()
        })
        .collect();
    let labels = (0..rows).map(|_| rng.random_range(0..2)).collect();
    (TokenBatch::from_sequences(&seqs), labels)
}

fn composed_yofo(rng: &mut ChaCha8Rng, t: u64) -> Result<f64> {
    let layers = rng.random_range(1..4);
    let gate = GateConfig {
        hidden: 3,
        keep_bias: rng.random_range(-1.0..2.0),
    };
    let mut store = ParamStore::<f64>::new();
    let model = YofoModel::new(tiny_config(layers), gate, &mut store, rng)?;
    let (batch, labels) = random_batch(rng, 3, 6);
    let mode = MODES[rng.random_range(0..4)];
    let k = rng.random_range(0..=layers);
    let length = make_length_config(k, layers - k, rng.random_range(0.1..0.9), mode, layers)?;
    let loss_mode = if t.is_multiple_of(2) {
        LossMode::Layerwise
    } else {
        LossMode::FinalLayer
    };
    let (beta, gamma, tau) = (
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..1.5),
    );
    let inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    max_relative_error(&inputs, H_COMPOSED, |tape, vars| {
        let p = Bindings(vars.to_vec());
        let mut r = ChaCha8Rng::seed_from_u64(t);
        let fwd = model.forward(
            tape,
            &p,
            &batch,
            GateMode::Sample { tau, hard: false },
            0.1,
            &mut r,
        )?;
        Ok(objective(tape, &fwd, &batch, &labels, &length, loss_mode, beta, gamma)?.total)
    })
}

fn composed_rnp(rng: &mut ChaCha8Rng, t: u64) -> Result<f64> {
    let cfg = RnpConfig {
        shared: t % 2 == 1,
        target: (!t.is_multiple_of(3)).then(|| rng.random_range(0.1..0.9)),
        keep_bias: rng.random_range(-1.0..2.0),
    };
    let mut store = ParamStore::<f64>::new();
    let model = RnpModel::new(
        tiny_config(rng.random_range(1..3)),
        cfg.clone(),
        &mut store,
        rng,
    )?;
    let (batch, labels) = random_batch(rng, 3, 6);
    let (beta, gamma, tau) = (
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..1.5),
    );
    let inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    max_relative_error(&inputs, H_COMPOSED, |tape, vars| {
        let p = Bindings(vars.to_vec());
        let mut r = ChaCha8Rng::seed_from_u64(t);
        let sel = model.generate_mask(
            tape,
            &p,
            &batch,
            GateMode::Sample { tau, hard: false },
            0.0,
            &mut r,
        )?;
        let logits = model.predict_masked(tape, &p, &batch, sel.mask)?;
        Ok(rnp_objective(tape, logits, &sel, &batch, &labels, cfg.target, beta, gamma)?.total)
    })
}

pub fn c1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    let checks = op_checks();
    for (name, check) in &checks {
        for trial in 0..TRIALS {
            let err = check(&mut rng, trial).map_err(|e| format!("{name}: {e}"))?;
            if err.is_nan() || err >= GRAD_TOL {
                failures.push(format!("{name} trial {trial}: {err:.2e}"));
            }
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let summary = format!(
        "{} ops x {TRIALS} trials, worst relative error {:.2e} ({})",
        checks.len(),
        worst.0,
        worst.1
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failures: {}", failures.join(", ")))
    }
}

fn monotone(masks: &[BinaryMask]) -> bool {
    masks
        .windows(2)
        .all(|w| w[1].0.iter().zip(&w[0].0).all(|(&a, &b)| !a || b))
}

pub fn c2_masks() -> Outcome {
    const DRAWS: usize = 1200;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = Vec::new();
    let mut store = ParamStore::<f64>::new();
    let mut model =
        YofoModel::new(tiny_config(3), GateConfig::default(), &mut store, &mut rng).unwrap();
    for draw in 0..DRAWS {
        if draw % 20 == 0 {
            store = ParamStore::new();
            let layers = rng.random_range(1..5);
            let gate = GateConfig {
                hidden: 4,
                keep_bias: 0.0,
            };
            model = YofoModel::new(tiny_config(layers), gate, &mut store, &mut rng).unwrap();
        }
        for g in &model.gates {
            let scale = rng.random_range(0.0..5.0);
            for v in store.get_mut(g.w2).data_mut() {
                *v = rng.random_range(-1.0..1.0) * scale;
            }
            store.get_mut(g.b2).data_mut()[1] = rng.random_range(-3.0..3.0);
        }
        let (batch, _) = random_batch(&mut rng, 4, 7);
        let mode = if draw % 3 == 2 {
            GateMode::Argmax
        } else {
            GateMode::Sample {
                tau: rng.random_range(0.1..2.0),
                hard: true,
            }
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let fwd = model
            .forward(&mut tape, &p, &batch, mode, 0.0, &mut rng)
            .unwrap();
        // Padding must be dropped at every layer.
        for m in fwd.masks() {
            for (row, &n) in tape.data(m).chunks(batch.len).zip(&batch.lens) {
                if row[n..].iter().any(|&v| v != 0.0) {
                    violations.push(format!("draw {draw}: padding kept"));
                }
            }
        }
        let hard = fwd.hard_masks(&tape, &batch);
        for b in 0..batch.batch {
            let per_layer: Vec<BinaryMask> = hard.iter().map(|layer| layer[b].clone()).collect();
            if !monotone(&per_layer) {
                violations.push(format!("draw {draw} row {b}: not monotone"));
            }
            if per_layer.iter().any(|m| !m.get(0)) {
                violations.push(format!("draw {draw} row {b}: position 0 dropped"));
            }
        }
        if draw % 3 == 2 {
            let tokens: Vec<usize> = batch.ids[1..batch.lens[0]].to_vec();
            let r = model.infer(&store, &tokens).unwrap();
            let nested = r
                .kept
                .windows(2)
                .all(|w| w[1].iter().all(|i| w[0].contains(i)));
            if !nested || r.kept.iter().any(|k| k.first() != Some(&0)) {
                violations.push(format!("draw {draw}: inference kept sets not nested"));
            }
        }
    }
    if violations.is_empty() {
        Ok(format!("{DRAWS} draws, 0 violations"))
    } else {
        Err(format!(
            "{} violations, first: {}",
            violations.len(),
            violations[0]
        ))
    }
}

pub fn c3_prune() -> Outcome {
    const CASES: usize = 150;
    const TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut sequences = 0;
    for case in 0..CASES {
        let layers = rng.random_range(1..5);
        let mut store = ParamStore::<f64>::new();
        let model = YofoModel::new(
            tiny_config(layers),
            GateConfig::default(),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let (batch, _) = random_batch(&mut rng, 3, 7);
        // Random nested keep sets per row, padding never kept.
        let mut masks = vec![vec![0.0; batch.batch * batch.len]; layers];
        for b in 0..batch.batch {
            let mut prev: Vec<bool> = (0..batch.len).map(|j| j < batch.lens[b]).collect();
            let keep_p = rng.random_range(0.2..1.0);
            for mask in masks.iter_mut() {
                for (j, flag) in prev.iter_mut().enumerate() {
                    *flag = *flag && (j == 0 || rng.random_bool(keep_p));
                    mask[b * batch.len + j] = f64::from(u8::from(*flag));
                }
            }
        }
        let tensors: Vec<Tensor<f64>> = masks
            .iter()
            .map(|m| Tensor::new(vec![batch.batch, batch.len], m.clone()).unwrap())
            .collect();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (hidden, logits) = model
            .forward_with_masks(&mut tape, &p, &batch, &tensors)
            .unwrap();
        let d = model.config().d_model;
        for b in 0..batch.batch {
            sequences += 1;
            let tokens = batch.ids[b * batch.len + 1..b * batch.len + batch.lens[b]].to_vec();
            let mut ptape = Tape::new();
            let pp = store.bind_frozen(&mut ptape);
            let mut decide = |layer: usize, _: &[f64], kept: &[usize]| -> Vec<bool> {
                kept.iter()
                    .map(|&pos| masks[layer][b * batch.len + pos] > 0.0)
                    .collect()
            };
            let (kept, phidden, plogits) = model
                .forward_pruned(&mut ptape, &pp, &tokens, &mut decide)
                .unwrap();
            for (layer, set) in kept.iter().enumerate() {
                let expected: Vec<usize> = (0..batch.lens[b])
                    .filter(|&j| masks[layer][b * batch.len + j] > 0.0)
                    .collect();
                if set != &expected {
                    return Err(format!(
                        "case {case}: layer {} kept {set:?}, mask says {expected:?}",
                        layer + 1
                    ));
                }
                let full = tape.data(hidden[layer]);
                let pruned = ptape.data(phidden[layer]);
                for (r, &pos) in set.iter().enumerate() {
                    let a = &full[(b * batch.len + pos) * d..(b * batch.len + pos + 1) * d];
                    let c = &pruned[r * d..(r + 1) * d];
                    for (x, y) in a.iter().zip(c) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
            let l = tape.data(logits);
            let pl = ptape.data(plogits);
            worst = worst
                .max((l[2 * b] - pl[0]).abs())
                .max((l[2 * b + 1] - pl[1]).abs());
        }
    }
    let summary =
        format!("{CASES} mask sequences over {sequences} texts, max abs difference {worst:.2e}");
    if worst <= TOL {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---- brute-force oracles, written independently of the library ----

fn oracle_omega(m: &[f64], ws: f64, wc: f64) -> f64 {
    let mut size = 0.0;
    for v in m {
        size += v.abs();
    }
    let mut jumps = 0.0;
    for j in 1..m.len() {
        jumps += (m[j] - m[j - 1]).abs();
    }
    ws * size + wc * jumps
}

fn oracle_mean(m: &[f64]) -> f64 {
    let mut total = 0.0;
    for v in m {
        total += v;
    }
    total / m.len() as f64
}

fn oracle_final(m: &[f64], s: f64) -> f64 {
    (oracle_mean(m) - s).abs()
}

fn oracle_layerwise(masks: &[Vec<f64>], targets: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..masks.len() {
        total += (oracle_mean(&masks[i]) - targets[i]).abs();
    }
    total / masks.len() as f64
}

fn oracle_contiguity(masks: &[Vec<f64>]) -> f64 {
    let l = masks[0].len();
    if l < 2 {
        return 0.0;
    }
    let mut transitions = 0.0;
    for m in masks {
        for j in 0..l - 1 {
            transitions += (m[j + 1] - m[j]).abs();
        }
    }
    transitions / (masks.len() * (l - 1)) as f64
}

fn oracle_schedule(k: usize, d: usize, s: f64, mode: DecayMode, n: usize) -> Vec<f64> {
    let e = std::f64::consts::E;
    (1..=n)
        .map(|i| {
            if i <= k {
                1.0
            } else if i > k + d || matches!(mode, DecayMode::Cliff) {
                s
            } else {
                let (t, d) = ((i - k) as f64, d as f64);
                match mode {
                    DecayMode::Linear => 1.0 - (1.0 - s) * t / d,
                    DecayMode::Exponential => s.powf(t / d),
                    DecayMode::Logarithmic => ((s.exp() * t + e * (d - t)) / d).ln(),
                    DecayMode::Cliff => unreachable!(),
                }
            }
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize, binary: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if binary {
                f64::from(u8::from(rng.random_bool(0.4)))
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect()
}

pub fn c4_oracles() -> Outcome {
    const DRAWS: usize = 1500;
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 4];
    let bump = |slot: &mut f64, a: f64, b: f64| *slot = slot.max((a - b).abs());
    for draw in 0..DRAWS {
        let binary = draw % 2 == 0;
        let layers = rng.random_range(1..6);
        let len = rng.random_range(2..30);
        let masks: Vec<Vec<f64>> = (0..layers)
            .map(|_| random_mask(&mut rng, len, binary))
            .collect();
        let (ws, wc) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        bump(
            &mut worst[0],
            omega_regularizer(&masks[0], ws, wc),
            oracle_omega(&masks[0], ws, wc),
        );

        let s = rng.random_range(0.0..1.0);
        bump(
            &mut worst[1],
            sparsity_final(&masks[layers - 1], s),
            oracle_final(&masks[layers - 1], s),
        );
        let k = rng.random_range(0..=layers);
        let config = make_length_config(
            k,
            rng.random_range(0..=layers - k),
            s,
            MODES[draw % 4],
            layers,
        )
        .unwrap();
        bump(
            &mut worst[2],
            sparsity_layerwise(&masks, &config).unwrap(),
            oracle_layerwise(&masks, &config.targets),
        );
        bump(
            &mut worst[3],
            contiguity(&masks).unwrap(),
            oracle_contiguity(&masks),
        );

        // Batched tape versions over padded rows: padding holds junk that
        // must not leak into the result.
        let rows = rng.random_range(1..5);
        let width = rng.random_range(1..12);
        let lens: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=width)).collect();
        let batch: Vec<Vec<f64>> = (0..layers)
            .map(|_| random_mask(&mut rng, rows * width, binary))
            .collect();
        let real = |layer: usize, b: usize| batch[layer][b * width..b * width + lens[b]].to_vec();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = batch
            .iter()
            .map(|m| tape.constant(Tensor::new(vec![rows, width], m.clone()).unwrap()))
            .collect();
        let fin = sparsity_final_tape(&mut tape, vars[layers - 1], &lens, s).unwrap();
        let lw = sparsity_layerwise_tape(&mut tape, &vars, &lens, &config).unwrap();
        let ct = contiguity_tape(&mut tape, &vars, &lens).unwrap();
        let avg = |f: &dyn Fn(usize) -> f64| (0..rows).map(f).sum::<f64>() / rows as f64;
        let fin_o = avg(&|b| oracle_final(&real(layers - 1, b), s));
        let lw_o = avg(&|b| {
            oracle_layerwise(
                &(0..layers).map(|i| real(i, b)).collect::<Vec<_>>(),
                &config.targets,
            )
        });
        let ct_o =
            avg(&|b| oracle_contiguity(&(0..layers).map(|i| real(i, b)).collect::<Vec<_>>()));
        bump(&mut worst[1], tape.value(fin).item(), fin_o);
        bump(&mut worst[2], tape.value(lw).item(), lw_o);
        bump(&mut worst[3], tape.value(ct).item(), ct_o);
    }

    let mut sched_worst = 0.0f64;
    let mut tail_exact = true;
    for draw in 0..DRAWS {
        let n = rng.random_range(1..25);
        let k = rng.random_range(0..=n);
        let d = rng.random_range(0..=n - k);
        let s = if draw % 10 == 0 {
            [0.0, 1.0][draw % 20 / 10]
        } else {
            rng.random_range(0.0..1.0)
        };
        let mode = MODES[draw % 4];
        let got = make_length_config(k, d, s, mode, n).unwrap().targets;
        let want = oracle_schedule(k, d, s, mode, n);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            sched_worst = sched_worst.max((g - w).abs());
            if i + 1 >= k + d.max(1) && i + 1 > k && *g != s {
                tail_exact = false;
            }
        }
    }
    let linear = make_length_config(3, 3, 0.1, DecayMode::Linear, 6)
        .unwrap()
        .targets;
    let expo = make_length_config(0, 2, 0.25, DecayMode::Exponential, 2)
        .unwrap()
        .targets;
    let log = make_length_config(0, 2, 0.1, DecayMode::Logarithmic, 2)
        .unwrap()
        .targets;
    let log_closed = ((0.1f64.exp() + std::f64::consts::E) / 2.0).ln();
    let examples = (linear[3] - 0.7).abs() < TOL
        && (linear[4] - 0.4).abs() < TOL
        && linear[5] == 0.1
        && (expo[0] - 0.5).abs() < TOL
        && (log[0] - log_closed).abs() < TOL
        && log[1] == 0.1;

    let summary = format!(
        "{DRAWS} draws; max error omega {:.1e}, final {:.1e}, layerwise {:.1e}, contiguity {:.1e}, schedules {:.1e}; tails exact: {tail_exact}; worked examples: {examples}",
        worst[0], worst[1], worst[2], worst[3], sched_worst
    );
    if worst.iter().all(|&w| w <= TOL) && sched_worst <= TOL && tail_exact && examples {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn c8_metrics() -> Outcome {
    const PAIRS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..PAIRS {
        let n = rng.random_range(0..40);
        let density = rng.random_range(0.0..1.0);
        let pred = BinaryMask((0..n).map(|_| rng.random_bool(density)).collect());
        let gold = BinaryMask((0..n).map(|_| rng.random_bool(density)).collect());
        let a: HashSet<usize> = (0..n).filter(|&i| pred.0[i]).collect();
        let g: HashSet<usize> = (0..n).filter(|&i| gold.0[i]).collect();
        let inter = a.intersection(&g).count() as f64;
        let p = if a.is_empty() {
            0.0
        } else {
            inter / a.len() as f64
        };
        let r = if g.is_empty() {
            0.0
        } else {
            inter / g.len() as f64
        };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let got = token_prf(&pred, &gold).map_err(|e| e.to_string())?;
        if got.precision != p || got.recall != r || got.f1 != f {
            mismatches += 1;
        }
    }
    let mut data: Vec<Example> = (0..1000)
        .map(|i| Example::new(vec![3], usize::from(i < 759)))
        .collect();
    let majority = majority_baseline(&data).map_err(|e| e.to_string())?;
    data.iter_mut().for_each(|e| e.label = 1 - e.label);
    let flipped = majority_baseline(&data).map_err(|e| e.to_string())?;
    let summary =
        format!("{PAIRS} pairs, {mismatches} mismatches; majority {majority} / {flipped}");
    if mismatches == 0 && majority == 0.759 && flipped == 0.759 {
        Ok(summary)
    } else {
        Err(summary)
    }
}
