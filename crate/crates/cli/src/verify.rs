//! Built-in verification battery: gradient checks, STFT round trip, slicing
//! equivalence, parameter count and metric closed forms.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samsnet::eval::{irm_oracle, sdr};
use samsnet::model::{param_count, slice_bounds, ModelConfig, SamsNet};
use samsnet::numerics::gradcheck::{finite_differences, GradCheckReport};
use samsnet::numerics::{Eager, Graph, Tape};
use samsnet::signal::{istft, stft, Stft, StftConfig, Waveform};
use samsnet::train::{compute_loss, LossDomain};
use samsnet::{Result, Tensor};

/// Reference total from the published comparison table.
pub const REFERENCE_PARAMS: f64 = 3.70e6;
pub const PARAM_BAND: (usize, usize) = (3_300_000, 4_100_000);

/// Backward rules the fault-injection hook can scale.
pub const PERTURBABLE: &[&str] = &[
    "conv2d",
    "transpose_conv2d",
    "depthwise_conv",
    "matmul_batched",
    "softmax_rows",
    "layer_norm",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "slice",
    "concat",
    "sum",
    "sum_squares",
    "masked_istft",
];

/// A backward rule to corrupt, and by how much.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

impl Fault {
    pub fn named(op: &str, factor: f64) -> Option<Self> {
        PERTURBABLE.iter().find(|n| **n == op).map(|&op| Self { op, factor })
    }

    fn apply<T: samsnet::Scalar>(fault: Option<Self>, tape: &mut Tape<T>) {
        if let Some(f) = fault {
            tape.perturb_backward(f.op, f.factor);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(channels: usize, heads: usize, blocks: usize, bins: usize) -> ModelConfig {
    ModelConfig { channels, heads, blocks, freq_bins: bins, slices: 1, ..ModelConfig::default() }
}

/// Autodiff against central differences (step 1e-5) over every parameter of
/// a C=4, H=2, N=1 network on a 6-frame, 8-bin input in f64.
pub fn model_gradients(fault: Option<Fault>) -> Check {
    timed("model gradients", || {
        let net = SamsNet::<f64>::new(tiny(4, 2, 1, 8), &mut rng(1))?;
        let x = Tensor::uniform(&[2, 6, 8], 0.0, 1.0, &mut rng(2));
        let r = Tensor::uniform(&[2, 6, 8], -1.0, 1.0, &mut rng(3));
        let loss = |g: &mut Tape<f64>, net: &SamsNet<f64>| -> Result<_> {
            let b = net.bind(g);
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let y = b.forward_value(g, &xv, 1)?;
            let yr = g.mul(&y, &rv)?;
            Ok((b.values().to_vec(), g.sum(&yr)?))
        };
        let mut tape = Tape::new();
        Fault::apply(fault, &mut tape);
        let (vars, l) = loss(&mut tape, &net)?;
        tape.backward(l)?;
        let mut analytic = Vec::new();
        let mut at = Vec::new();
        for (ti, v) in vars.iter().enumerate() {
            let g = tape.grad(*v)?.unwrap_or(&[]);
            analytic.extend_from_slice(g);
            at.extend((0..g.len()).map(|e| (ti, e)));
        }
        let cfg = net.config().clone();
        let mut params = net.params().to_vec();
        let numeric = finite_differences(&mut params, &at, 1e-5, |p| {
            let m = SamsNet::from_params(cfg.clone(), p.to_vec())?;
            let mut t = Tape::new();
            let (_, l) = loss(&mut t, &m)?;
            t.value(l)?.item()
        })?;
        let report = GradCheckReport::new(&analytic, &numeric);
        let within = report.fraction_within(1e-4);
        let max = report.max_error();
        let passed = analytic.len() == net.param_count() && within >= 0.99 && max < 1e-3;
        Ok((passed, format!("{} params, {:.2}% within 1e-4, max rel err {max:.2e}", analytic.len(), 100.0 * within)))
    })
}

/// Gradient of the waveform loss with respect to the mask.
pub fn masked_istft_gradient(fault: Option<Fault>) -> Check {
    timed("masked ISTFT gradient", || {
        let stft = Arc::new(Stft::<f64>::new(StftConfig { window: 16, hop: 4, n_fft: 16 })?);
        let noise = |seed| {
            let mut r = rng(seed);
            let mut ch = || (0..38).map(|_| r.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
            Waveform::new(ch(), ch(), 8000)
        };
        let (mix, target) = (noise(4)?, noise(5)?);
        let spec = stft.analyze(&mix)?;
        let mask = Tensor::uniform(spec.magnitude.shape(), 0.0, 1.2, &mut rng(6));
        let mut tape = Tape::new();
        Fault::apply(fault, &mut tape);
        let m = tape.param(&mask);
        let l = compute_loss(&mut tape, &m, &spec, &target, LossDomain::Time, &stft)?;
        tape.backward(l)?;
        let analytic = tape.grad(m)?.unwrap_or(&[]).to_vec();
        let at: Vec<_> = (0..mask.numel()).map(|i| (0, i)).collect();
        // the loss is quadratic in the mask, so a large step is exact and
        // keeps rounding out of the small entries
        let numeric = finite_differences(&mut [mask], &at, 1e-2, |p| {
            compute_loss(&mut Eager, &p[0], &spec, &target, LossDomain::Time, &stft)?.item()
        })?;
        let max = GradCheckReport::new(&analytic, &numeric).max_error();
        Ok((analytic.len() == at.len() && max < 1e-4, format!("{} mask entries, max rel err {max:.2e}", at.len())))
    })
}

/// 3 s of noise and of a chirp at 44.1 kHz through analysis and synthesis,
/// scored away from the edges; then linearity of the analysis.
pub fn stft_roundtrip() -> Check {
    timed("STFT round trip", || {
        let sr = 44_100;
        let len = 3 * sr as usize;
        let mut r = rng(7);
        let mut noise = || (0..len).map(|_| r.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
        let chirp: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / sr as f64;
                0.8 * (2.0 * PI * (50.0 * t + 3000.0 * t * t)).sin()
            })
            .collect();
        let a = Waveform::new(noise(), noise(), sr)?;
        let b = Waveform::new(chirp.clone(), chirp.iter().map(|v| -v).collect(), sr)?;
        let interior = 4096..len - 4096;
        let mut worst = f64::NEG_INFINITY;
        for x in [&a, &b] {
            let y = istft(&stft(x)?, len)?;
            for ch in 0..2 {
                let (yc, xc) = (y.channel(ch), x.channel(ch));
                let e: f64 = interior.clone().map(|i| (yc[i] - xc[i]).powi(2)).sum();
                let s: f64 = interior.clone().map(|i| xc[i].powi(2)).sum();
                worst = worst.max(10.0 * (e / s).log10());
            }
        }
        let (alpha, beta) = (0.7, -1.3);
        let combo = a.scaled(alpha).add(&b.scaled(beta))?;
        let (sa, sb, sc) = (stft(&a)?.to_cartesian(), stft(&b)?.to_cartesian(), stft(&combo)?.to_cartesian());
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..sc.0.len() {
            let re = alpha * sa.0[i] + beta * sb.0[i];
            let im = alpha * sa.1[i] + beta * sb.1[i];
            num += (sc.0[i] - re).powi(2) + (sc.1[i] - im).powi(2);
            den += re * re + im * im;
        }
        let lin = (num / den).sqrt();
        Ok((worst < -60.0 && lin < 1e-5, format!("worst interior error {worst:.1} dB, linearity rel err {lin:.1e}")))
    })
}

/// One slice is bitwise plain multi-head attention on 20 inputs, and a
/// perturbation inside one chunk changes that chunk only.
pub fn slicing_equivalence() -> Check {
    timed("slicing equivalence", || {
        let net = SamsNet::<f64>::new(tiny(3, 2, 1, 6), &mut rng(8))?;
        let mut g = Eager;
        let bound = net.bind(&mut g);
        for seed in 0..20 {
            let x = Tensor::uniform(&[3, 7, 6], -1.0, 1.0, &mut rng(100 + seed));
            let sliced = bound.sliced_attention(&mut g, 0, &x, 1)?;
            let plain = bound.multi_head(&mut g, 0, &x)?;
            if sliced != plain {
                return Ok((false, format!("input {seed}: one slice differs from multi-head")));
            }
        }
        let (frames, bins, ch) = (10, 6, 3);
        let x = Tensor::uniform(&[ch, frames, bins], -1.0, 1.0, &mut rng(9));
        let base = bound.sliced_attention(&mut g, 0, &x, 3)?;
        for r in slice_bounds(frames, 3)? {
            let mut xp = x.clone();
            for c in 0..ch {
                for t in r.clone() {
                    for f in 0..bins {
                        xp.data_mut()[(c * frames + t) * bins + f] += 0.3;
                    }
                }
            }
            let y = bound.sliced_attention(&mut g, 0, &xp, 3)?;
            for c in 0..ch {
                for t in 0..frames {
                    let row = (c * frames + t) * bins..(c * frames + t + 1) * bins;
                    let changed = y.data()[row.clone()] != base.data()[row];
                    if changed != r.contains(&t) {
                        return Ok((false, format!("chunk {r:?}: frame {t} changed = {changed}")));
                    }
                }
            }
        }
        Ok((true, "20 inputs bitwise equal at I=1; 3 chunks local".into()))
    })
}

/// Total for N=3, H=2, C=64 at 2049 bins.
pub fn parameter_count() -> Check {
    timed("parameter count", || {
        let n = param_count(&ModelConfig::default());
        let passed = (PARAM_BAND.0..=PARAM_BAND.1).contains(&n);
        Ok((passed, format!("{n} ({:.2}M) vs reference {:.2}M", n as f64 / 1e6, REFERENCE_PARAMS / 1e6)))
    })
}

/// SDR of a half-scale estimate, of silence, and binary IRM on disjoint
/// spectral support.
pub fn metric_analytics() -> Check {
    timed("metric closed forms", || {
        let mut r = rng(10);
        let mut ch = || (0..8000).map(|_| r.gen_range(-0.5f64..0.5)).collect::<Vec<_>>();
        let s = Waveform::new(ch(), ch(), 8000)?;
        let half = sdr(&s, &s.scaled(0.5))?;
        let zero = sdr(&s, &Waveform::silence(s.len(), 8000))?;
        let shape = [2, 3, 8];
        let mut a = Tensor::<f64>::zeros(&shape);
        let mut b = Tensor::<f64>::zeros(&shape);
        for (i, (x, y)) in a.data_mut().iter_mut().zip(b.data_mut()).enumerate() {
            let v = 0.1 + (i as f64 * 0.37).sin().abs();
            if i % 8 < 4 {
                *x = v;
            } else {
                *y = v;
            }
        }
        let mix = Tensor::from_vec(&shape, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())?;
        let masks = irm_oracle(&mix, &[&a, &b])?;
        let dev = masks
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|v| v.abs().min((v - 1.0).abs()))
            .fold(0.0, f64::max);
        let expect = 20.0 * 2f64.log10();
        let passed = (half - expect).abs() < 1e-3 && zero.abs() < 1e-6 && dev < 1e-6;
        Ok((passed, format!("sdr(s, s/2) = {half:.4} dB, sdr(s, 0) = {zero:.1e} dB, IRM off {{0,1}} by {dev:.1e}")))
    })
}

/// The whole battery in order.
pub fn battery(fault: Option<Fault>) -> Vec<Check> {
    vec![
        model_gradients(fault),
        masked_istft_gradient(fault),
        stft_roundtrip(),
        slicing_equivalence(),
        parameter_count(),
        metric_analytics(),
    ]
}
