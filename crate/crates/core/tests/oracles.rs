//! Library kernels against independent loop implementations.

#![allow(clippy::needless_range_loop)]

mod common;

use common::{matvec, relu};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relgraph::data::{compute_stats, generate_synthetic, SynthConfig};
use relgraph::fem::{self, FeatureMap, PersonBox, SeGate};
use relgraph::loss::{compute_class_weights, weighted_bce, ClassWeights, LossForm};
use relgraph::params::{ParamBuilder, ParamStore};
use relgraph::quant::EmaObserver;
use relgraph::{Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn matmul_and_linear_match_triple_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (m, k, n) = (
            rng.gen_range(1..7),
            rng.gen_range(1..7),
            rng.gen_range(1..7),
        );
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let w = random(&mut rng, &[n, k]);
        let mut tape = Tape::new();
        let (va, vb, vw) = (
            tape.constant(a.clone()),
            tape.constant(b.clone()),
            tape.constant(w.clone()),
        );
        let prod = tape.matmul(va, vb).unwrap();
        let lin = tape.linear(va, vw, None).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!(close(tape.value(prod).at(&[i, j]), acc, 1e-14));
            }
            let row: Vec<f64> = (0..k).map(|p| a.at(&[i, p])).collect();
            let expect = matvec(&w, &row);
            assert_eq!(&tape.value(lin).data()[i * n..(i + 1) * n], &expect[..]);
        }
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w, o) = (3, 5, 6, 4);
    let x = random(&mut rng, &[c, h, w]);
    let k = random(&mut rng, &[o, c, 3, 3]);
    let b = random(&mut rng, &[o]);
    let mut tape = Tape::new();
    let (vx, vk, vb) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(vx, vk, Some(vb)).unwrap();
    for oc in 0..o {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) =
                                (yy as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc +=
                                    k.at(&[oc, ic, dy, dx]) * x.at(&[ic, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                assert!(close(tape.value(y).at(&[oc, yy, xx]), acc, 1e-13));
            }
        }
    }
}

#[test]
fn se_gate_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, r) = (8, 3, 4, 4);
    let mut store = ParamStore::<f64>::default();
    let se = SeGate::new(
        &mut ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        },
        c,
        r,
    )
    .unwrap();
    for v in store.values_mut() {
        for x in v.data_mut() {
            *x += 0.1;
        }
    }
    let x = random(&mut rng, &[c, h, w]);

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false, false);
    let vx = tape.constant(x.clone());
    let f = FeatureMap::from_var(&tape, vx).unwrap();
    let out = se.forward(&mut tape, &p, &f).unwrap();

    let [w1, b1, w2, b2] = se.param_ids().map(|id| store.get(id).clone());
    let mean: Vec<f64> = (0..c)
        .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    let z: Vec<f64> = matvec(&w1, &mean)
        .iter()
        .zip(b1.data())
        .map(|(a, b)| relu(a + b))
        .collect();
    let s: Vec<f64> = matvec(&w2, &z)
        .iter()
        .zip(b2.data())
        .map(|(a, b)| 1.0 / (1.0 + (-(a + b)).exp()))
        .collect();
    for ch in 0..c {
        assert!(s[ch] > 0.0 && s[ch] < 1.0);
        for k in 0..h * w {
            let idx = ch * h * w + k;
            assert!(close(
                tape.value(out.var).data()[idx],
                x.data()[idx] * s[ch],
                1e-13
            ));
        }
    }
}

#[test]
fn roi_pool_matches_cell_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, h, w) = (2, 7, 9);
    for _ in 0..40 {
        let x = random(&mut rng, &[c, h, w]);
        let (x1, y1) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
        let bx = PersonBox::new(
            x1,
            y1,
            x1 + rng.gen_range(0.05..0.5),
            y1 + rng.gen_range(0.05..0.5),
        )
        .unwrap();
        let k = rng.gen_range(1..4);

        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let f = FeatureMap::from_var(&tape, vx).unwrap();
        let pooled = fem::roi_pool(&mut tape, &f, &bx, k).unwrap();

        let cells = |lo: f64, hi: f64, n: usize| {
            let start = ((lo * n as f64).floor() as usize).min(n - 1);
            let end = ((hi * n as f64).ceil() as usize).clamp(start + 1, n);
            (start, end)
        };
        let (ry0, ry1) = cells(bx.y1, bx.y2, h);
        let (rx0, rx1) = cells(bx.x1, bx.x2, w);
        let mut expect = Vec::new();
        for ch in 0..c {
            for by in 0..k {
                for bxi in 0..k {
                    let ys = ry0 + by * (ry1 - ry0) / k..ry0 + ((by + 1) * (ry1 - ry0)).div_ceil(k);
                    let xs =
                        rx0 + bxi * (rx1 - rx0) / k..rx0 + ((bxi + 1) * (rx1 - rx0)).div_ceil(k);
                    let mut sum = 0.0;
                    let mut count = 0;
                    for yy in ys {
                        for xx in xs.clone() {
                            sum += x.at(&[ch, yy, xx]);
                            count += 1;
                        }
                    }
                    expect.push(sum / count as f64);
                }
            }
        }
        let got = tape.value(pooled).data();
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert!(close(*g, *e, 1e-13));
        }
    }
}

#[test]
fn full_box_single_cell_roi_equals_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(1, 1), (4, 4), (3, 5)] {
        let x = random(&mut rng, &[3, h, w]);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let f = FeatureMap::from_var(&tape, vx).unwrap();
        let g = fem::gap(&mut tape, &f).unwrap();
        let r = fem::roi_pool(&mut tape, &f, &PersonBox::full(), 1).unwrap();
        let (g, r) = (tape.value(g).data().to_vec(), tape.value(r).data().to_vec());
        for (a, b) in g.iter().zip(&r) {
            assert_eq!(a, b);
        }
    }
}

fn bce_oracle(logits: &Tensor<f64>, slots: &[usize], classes: &[usize], w: &[f64]) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (&s, &t) in slots.iter().zip(classes) {
        for k in 0..c {
            let p = (1.0 / (1.0 + (-logits.at(&[s, k])).exp())).clamp(1e-12, 1.0 - 1e-12);
            let y = if k == t { 1.0 } else { 0.0 };
            total -= w[k] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
    }
    total / slots.len() as f64
}

#[test]
fn weighted_bce_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..30 {
        let c = rng.gen_range(2..7);
        let rows = rng.gen_range(2..10);
        let logits = Tensor::from_fn(&[rows, c], |_| rng.gen_range(-6.0..6.0));
        let slots: Vec<usize> = (0..rng.gen_range(1..=rows))
            .map(|_| rng.gen_range(0..rows))
            .collect();
        let classes: Vec<usize> = slots.iter().map(|_| rng.gen_range(0..c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| rng.gen_range(1..50)).collect();
        let weights = compute_class_weights(&counts).unwrap();

        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let loss =
            weighted_bce(&mut tape, v, &slots, &classes, &weights, LossForm::Standard).unwrap();
        let expect = bce_oracle(&logits, &slots, &classes, &weights.weights);
        assert!(close(tape.value(loss).item(), expect, 1e-12));
    }
}

#[test]
fn equal_counts_scale_loss_by_twice_the_class_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in 2..7 {
        let logits = Tensor::from_fn(&[4, c], |_| rng.gen_range(-3.0..3.0));
        let slots = [0, 1, 2, 3];
        let classes: Vec<usize> = (0..4).map(|k| k % c).collect();
        let weighted = compute_class_weights(&vec![13; c]).unwrap();
        assert!(weighted.weights.iter().all(|&w| w == 2.0 * c as f64));
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let a = weighted_bce(
            &mut tape,
            v,
            &slots,
            &classes,
            &weighted,
            LossForm::Standard,
        )
        .unwrap();
        let b = weighted_bce(
            &mut tape,
            v,
            &slots,
            &classes,
            &ClassWeights::uniform(c),
            LossForm::Standard,
        )
        .unwrap();
        assert!(close(
            tape.value(a).item(),
            2.0 * c as f64 * tape.value(b).item(),
            1e-13
        ));
    }
}

#[test]
fn dataset_statistics_match_counting_loops() {
    let classes = 5;
    let data = generate_synthetic(&SynthConfig {
        images: 40,
        classes,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let s = compute_stats(&data, classes).unwrap();
    let mut counts = vec![0usize; classes];
    let mut unique = vec![0usize; classes + 1];
    let mut pairs = 0;
    for im in &data {
        let mut seen = vec![false; classes];
        for r in &im.relations {
            counts[r.class] += 1;
            seen[r.class] = true;
            pairs += 1;
        }
        unique[seen.iter().filter(|&&b| b).count()] += 1;
    }
    assert_eq!(s.images, data.len());
    assert_eq!(s.pairs, pairs);
    assert_eq!(s.class_counts, counts);
    assert_eq!(s.unique_relations, unique);
    if counts.iter().all(|&n| n > 0) {
        let total: usize = counts.iter().sum();
        let w = s.weights.unwrap();
        for (k, &n) in counts.iter().enumerate() {
            assert!(close(w.weights[k], 2.0 * total as f64 / n as f64, 1e-15));
        }
    }
}

#[test]
fn ema_observer_follows_the_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let decay = 0.9;
    let mut o = EmaObserver::new(decay);
    let (mut lo, mut hi) = (0.0, 0.0);
    for step in 0..50 {
        let batch: Vec<f64> = (0..rng.gen_range(1..20))
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let bmin = batch.iter().cloned().fold(f64::INFINITY, f64::min);
        let bmax = batch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if step == 0 {
            (lo, hi) = (bmin, bmax);
        } else {
            lo = decay * lo + (1.0 - decay) * bmin;
            hi = decay * hi + (1.0 - decay) * bmax;
        }
        o.observe(&batch);
        assert_eq!((o.min, o.max), (lo, hi));
    }
    let s = o.scheme().unwrap();
    assert!(s.scale > 0.0);
    assert!(s.dequantize(s.quantize(0.0)) == 0.0);
}
