//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use evlol_core::event::{Event, EventStream, Polarity, SimulatorConfig};
use evlol_core::model::{Ctx, ParamSpec, ParamStore};
use evlol_core::tensor::{Tensor, Var};
use evlol_core::{Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random gray sequence of `frames` images with uniformly spaced timestamps.
pub fn random_gray(rng: &mut ChaCha8Rng, frames: usize, h: usize, w: usize) -> (Vec<Image>, Vec<u64>) {
    let imgs = (0..frames)
        .map(|_| Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect();
    let dt = rng.random_range(100..5000u64);
    let ts = (0..frames as u64).map(|k| 1000 + k * dt).collect();
    (imgs, ts)
}

/// Brute-force crossing oracle. Every pixel keeps the level of its last
/// event; on each linear segment the `k`-th level beyond it in the direction
/// of travel is `last ± k·c`, and it fires when the segment reaches it.
pub fn oracle_events(frames: &[Image], ts: &[u64], cfg: &SimulatorConfig) -> Vec<(u64, u16, u16, i8)> {
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l: Vec<f64> = frames.iter().map(|f| (f.get(y, x, 0) as f64 + cfg.log_eps).ln()).collect();
            let mut last = l[0];
            for k in 1..l.len() {
                let (a, b) = (l[k - 1], l[k]);
                let (t0, t1) = (ts[k - 1] as f64, ts[k] as f64);
                let (c, sign) = if b > a {
                    (cfg.contrast_threshold_pos, 1.0)
                } else {
                    (cfg.contrast_threshold_neg, -1.0)
                };
                if a == b {
                    continue;
                }
                let mut n = 0;
                let start = last;
                loop {
                    let level = start + sign * (n + 1) as f64 * c;
                    if sign * (b - level) < -1e-9 {
                        break;
                    }
                    n += 1;
                    last = level;
                    let t = t0 + (level - a) / (b - a) * (t1 - t0);
                    out.push((t.clamp(t0, t1).floor() as u64, x as u16, y as u16, sign as i8));
                }
            }
        }
    }
    out
}

/// Multiset equality with per-event timestamps allowed to differ by `tol` µs.
pub fn same_events(got: &EventStream, want: &[(u64, u16, u16, i8)], tol: u64) -> bool {
    if got.len() != want.len() {
        return false;
    }
    let key = |&(t, x, y, p): &(u64, u16, u16, i8)| (y, x, p, t);
    let mut a: Vec<_> = got
        .events()
        .iter()
        .map(|e| (e.t, e.x, e.y, e.polarity.sign()))
        .collect();
    let mut b = want.to_vec();
    a.sort_by_key(key);
    b.sort_by_key(key);
    a.iter().zip(&b).all(|(p, q)| p.1 == q.1 && p.2 == q.2 && p.3 == q.3 && p.0.abs_diff(q.0) <= tol)
}

pub fn random_stream(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize, span: (u64, u64)) -> EventStream {
    let events = (0..n)
        .map(|_| {
            let pol = if rng.random::<bool>() { Polarity::Positive } else { Polarity::Negative };
            Event::new(
                rng.random_range(span.0..=span.1),
                rng.random_range(0..w as u16),
                rng.random_range(0..h as u16),
                pol,
            )
        })
        .collect();
    EventStream::new(h, w, events).unwrap()
}

/// Voxel grid by the textbook formula, one event at a time.
pub fn oracle_voxels(stream: &EventStream, t0: u64, t1: u64, bins: usize) -> Vec<f64> {
    let (h, w) = (stream.height(), stream.width());
    let mut grid = vec![0.0; bins * h * w];
    for e in stream.events().iter().filter(|e| e.t >= t0 && e.t <= t1) {
        let ts = (bins - 1) as f64 * (e.t - t0) as f64 / (t1 - t0) as f64;
        for b in 0..bins {
            let k = (1.0 - (ts - b as f64).abs()).max(0.0);
            grid[(b * h + e.y as usize) * w + e.x as usize] += e.polarity.sign() as f64 * k;
        }
    }
    grid
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

/// Parameters with every entry random, biases and norm affine terms included,
/// so no gradient is trivially zero.
pub fn random_params(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::default();
    for s in specs {
        let fan: usize = s.shape.iter().skip(1).product::<usize>().max(1);
        let t = random_tensor(&mut r, &s.shape, (3.0 / fan as f64).sqrt());
        store.insert(s.name.clone(), t);
    }
    store
}

pub struct GradCheck {
    /// Largest norm-wise relative error over all checked tensors.
    pub worst: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

fn norm_rel(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences (`h = 1e-4`) against the tape gradient of the
/// scalar `Σ wᵢ·outᵢ` with fixed random `w`, over every input and every
/// parameter. At most `samples` coordinates per tensor are probed.
pub fn grad_check<F>(params: &ParamStore<f64>, inputs: &[Tensor<f64>], samples: usize, seed: u64, f: F) -> GradCheck
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Vec<Var>>,
{
    const H: f64 = 1e-4;
    let mut r = rng(seed);
    fn run<'a, F>(f: &F, params: &'a ParamStore<f64>, inputs: &[Tensor<f64>]) -> (Ctx<'a, f64>, Vec<Var>, Vec<Var>)
    where
        F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Vec<Var>>,
    {
        let mut ctx = Ctx::new(params, true);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.g.param(t.clone())).collect();
        let outs = f(&mut ctx, &vars).expect("forward");
        (ctx, vars, outs)
    }
    let (ctx0, _, outs0) = run(&f, params, inputs);
    let weights: Vec<Tensor<f64>> = outs0
        .iter()
        .map(|&o| random_tensor(&mut r, ctx0.g.shape(o), 1.0))
        .collect();
    drop(ctx0);
    let loss_of = |params: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let (ctx, _, outs) = run(&f, params, inputs);
        outs.iter()
            .zip(&weights)
            .map(|(&o, w)| ctx.g.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };

    let (mut ctx, vars, outs) = run(&f, params, inputs);
    let mut total = None;
    for (&o, w) in outs.iter().zip(&weights) {
        let d = ctx.g.dot(o, w.clone()).unwrap();
        total = Some(match total {
            None => d,
            Some(t) => ctx.g.add(t, d).unwrap(),
        });
    }
    let mut grads = ctx.g.backward(total.unwrap()).unwrap();
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads: BTreeMap<String, Tensor<f64>> = ctx.param_grads(&mut grads);
    drop(ctx);

    let mut report = GradCheck {
        worst: 0.0,
        worst_tensor: String::new(),
        checked: 0,
    };
    let pick = |len: usize, r: &mut ChaCha8Rng| -> Vec<usize> {
        if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| r.random_range(0..len)).collect()
        }
    };
    let record = |name: String, analytic: Vec<f64>, numeric: Vec<f64>, rep: &mut GradCheck| {
        let e = norm_rel(&analytic, &numeric);
        rep.checked += 1;
        if e >= rep.worst {
            rep.worst = e;
            rep.worst_tensor = name;
        }
    };

    for (i, g) in input_grads.iter().enumerate() {
        let idx = pick(g.len(), &mut r);
        let mut num = Vec::new();
        for &j in &idx {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            num.push((loss_of(params, &plus) - loss_of(params, &minus)) / (2.0 * H));
        }
        let ana = idx.iter().map(|&j| g.data()[j]).collect();
        record(format!("input{i}"), ana, num, &mut report);
    }
    for (name, g) in &param_grads {
        let idx = pick(g.len(), &mut r);
        let mut num = Vec::new();
        for &j in &idx {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= H;
            num.push((loss_of(&plus, inputs) - loss_of(&minus, inputs)) / (2.0 * H));
        }
        let ana = idx.iter().map(|&j| g.data()[j]).collect();
        record(name.clone(), ana, num, &mut report);
    }
    report
}

/// The network components checked against finite differences, each on
/// random inputs with 8×8 spatial extent where the component allows it.
pub fn gradient_cases() -> Vec<(&'static str, GradCheck)> {
    use evlol_core::model::{
        acmf_forward, acmf_specs, decode_mask, decoder_specs, egmm_match, encode_event, encode_image, encoder_specs,
        guide, guide_specs, Features, MatchEntry,
    };
    const SAMPLES: usize = 12;
    let mut out = Vec::new();
    let mut r = rng(11);

    let c = 4;
    let inputs = vec![random_tensor(&mut r, &[1, c, 8, 8], 1.0), random_tensor(&mut r, &[1, c, 8, 8], 1.0)];
    let params = random_params(&acmf_specs("f", c), 1);
    out.push((
        "ACMF",
        grad_check(&params, &inputs, SAMPLES, 2, |ctx, v| {
            let (fused, gate) = acmf_forward(ctx, "f", v[0], v[1])?;
            Ok(vec![fused, gate])
        }),
    ));

    let inputs = vec![random_tensor(&mut r, &[1, 3, 8, 8], 1.0), random_tensor(&mut r, &[1, 2, 8, 8], 1.0)];
    let params = random_params(&guide_specs("g", 5, 4, 3), 3);
    out.push((
        "Guide",
        grad_check(&params, &inputs, SAMPLES, 4, |ctx, v| Ok(vec![guide(ctx, "g", v[0], v[1])?])),
    ));

    let (d, p) = (4, 64);
    let inputs: Vec<_> = (0..7).map(|_| random_tensor(&mut r, &[1, d, p], 1.0)).collect();
    let gates: Vec<_> = (0..2).map(|_| random_tensor(&mut r, &[1, d, p], 1.0).map(|v| 1.0 / (1.0 + (-v).exp()))).collect();
    let params = ParamStore::default();
    out.push((
        "EGMM attention",
        grad_check(&params, &[inputs, gates].concat(), SAMPLES, 5, |ctx, v| {
            let memory = [
                MatchEntry { key: v[1], value: v[2], guide: v[7] },
                MatchEntry { key: v[3], value: v[4], guide: v[8] },
            ];
            let m = egmm_match(&mut ctx.g, v[0], &memory, true)?;
            Ok(vec![m.readout, m.attention])
        }),
    ));

    let w = [4, 4, 4];
    let inputs = vec![
        random_tensor(&mut r, &[1, 4, 2, 2], 1.0),
        random_tensor(&mut r, &[1, 4, 2, 2], 1.0),
        random_tensor(&mut r, &[1, 4, 4, 4], 1.0),
        random_tensor(&mut r, &[1, 4, 8, 8], 1.0),
    ];
    let params = random_params(&decoder_specs("dec", 4, w, 2), 6);
    out.push((
        "decoder",
        grad_check(&params, &inputs, SAMPLES, 7, |ctx, v| {
            let feats = Features { f16: v[1], f8: v[2], f4: v[3] };
            Ok(vec![decode_mask(ctx, "dec", v[0], &feats)?])
        }),
    ));

    // The encoders reduce by 16, so 16×16 is the smallest valid input.
    let inputs = vec![random_tensor(&mut r, &[1, 3, 16, 16], 1.0), random_tensor(&mut r, &[1, 2, 16, 16], 1.0)];
    let mut specs = encoder_specs("enc_img", 3, w);
    specs.extend(encoder_specs("enc_evt", 2, w));
    let params = random_params(&specs, 8);
    out.push((
        "encoders",
        grad_check(&params, &inputs, SAMPLES, 9, |ctx, v| {
            let a = encode_image(ctx, v[0], 2)?;
            let b = encode_event(ctx, v[1], 2)?;
            Ok(vec![a.f4, a.f8, a.f16, b.f4, b.f8, b.f16])
        }),
    ));
    out
}
