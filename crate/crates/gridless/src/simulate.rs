//! Synthetic blinking-emitter stacks: telegraph on/off photophysics with
//! exponential lifetimes and bleaching, pixel-integrated Gaussian imaging,
//! constant background, Poisson shot noise and additive Gaussian noise.
//!
//! All randomness comes from per-stream ChaCha8 generators whose seeds are
//! derived from the configured seed by a splitmix64 chain keyed on a stream
//! tag and index (emitter index for traces, frame index for noise). Streams
//! are therefore independent of evaluation order and the output is
//! bit-identical whether frames are synthesised in parallel or not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::forward::{atom, PsfModel};
use crate::measure::DiscreteMeasure;
use crate::par;
use crate::stats::ImageStack;

/// Mean on/off/bleach lifetimes (seconds) and photon budget of one emitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoPhysics {
    pub tau_on: f64,
    pub tau_off: f64,
    pub tau_bleach: f64,
    /// Expected photons per frame while the emitter is on.
    pub photons_on: f64,
}

impl PhotoPhysics {
    pub fn new(tau_on: f64, tau_off: f64, tau_bleach: f64, photons_on: f64) -> Self {
        assert!(
            tau_on > 0.0 && tau_off > 0.0 && tau_bleach > 0.0 && photons_on > 0.0,
            "photophysics parameters must be strictly positive"
        );
        PhotoPhysics {
            tau_on,
            tau_off,
            tau_bleach,
            photons_on,
        }
    }

    /// Stationary fraction of time spent in the on state (ignoring
    /// bleaching).
    pub fn duty_cycle(&self) -> f64 {
        self.tau_on / (self.tau_on + self.tau_off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Photons per pixel per frame of constant out-of-focus background.
    pub background_photons: f64,
    /// Additive Gaussian noise level in dB relative to the RMS of the
    /// noiseless (pre-Poisson) stack; `None` disables it.
    pub gaussian_snr_db: Option<f64>,
    pub poisson_enabled: bool,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            background_photons: 0.0,
            gaussian_snr_db: None,
            poisson_enabled: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// Emitter positions; amplitudes are interpreted as per-emitter scale
    /// factors on `photons_on` (1.0 for the standard protocol).
    pub ground_truth: DiscreteMeasure,
    pub psf: PsfModel,
    pub photo: PhotoPhysics,
    pub noise: NoiseModel,
    pub frames: usize,
    pub frame_rate: f64,
    pub rng_seed: u64,
}

const TRACE_STREAM: u64 = 0x74726163; // "trac"
const FRAME_STREAM: u64 = 0x6672616d; // "fram"

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ tag).wrapping_add(index)))
}

/// Per-frame amplitudes of every emitter: a T x N row-major array. Each
/// emitter is an independent two-state telegraph process with exponential
/// sojourn times, integrated exactly over each frame interval (fraction of
/// the interval spent on, clipped at the bleaching time).
pub fn simulate_amplitude_traces(config: &SimulationConfig) -> Vec<f64> {
    let n = config.ground_truth.len();
    let t = config.frames;
    let dt = 1.0 / config.frame_rate;
    let columns = par::map_indexed(n, |i| {
        let scale = config.ground_truth.spikes()[i].amplitude;
        emitter_trace(config, i as u64, scale, t, dt)
    });
    let mut traces = vec![0.0; t * n];
    for (i, col) in columns.into_iter().enumerate() {
        for (f, v) in col.into_iter().enumerate() {
            traces[f * n + i] = v;
        }
    }
    traces
}

fn emitter_trace(config: &SimulationConfig, index: u64, scale: f64, t: usize, dt: f64) -> Vec<f64> {
    let photo = &config.photo;
    let mut rng = stream_rng(config.rng_seed, TRACE_STREAM, index);
    let bleach_at: f64 = Exp::new(1.0 / photo.tau_bleach).unwrap().sample(&mut rng);
    let on_dist = Exp::new(1.0 / photo.tau_on).unwrap();
    let off_dist = Exp::new(1.0 / photo.tau_off).unwrap();
    let mut state_on = rng.gen::<f64>() < photo.duty_cycle();
    let mut state_end: f64 = if state_on {
        on_dist.sample(&mut rng)
    } else {
        off_dist.sample(&mut rng)
    };
    let mut out = vec![0.0; t];
    let mut clock = 0.0f64;
    for (frame, slot) in out.iter_mut().enumerate() {
        let frame_end = (frame + 1) as f64 * dt;
        let mut on_time = 0.0f64;
        while clock < frame_end {
            let seg_end = state_end.min(frame_end);
            if state_on {
                // on-time counts only up to the bleaching instant
                let lit_end = seg_end.min(bleach_at);
                if lit_end > clock {
                    on_time += lit_end - clock;
                }
            }
            if seg_end >= state_end {
                state_on = !state_on;
                state_end += if state_on {
                    on_dist.sample(&mut rng)
                } else {
                    off_dist.sample(&mut rng)
                };
            }
            clock = seg_end;
        }
        *slot = scale * photo.photons_on * on_time / dt;
    }
    out
}

/// Everything the CLI reports about one synthesis run.
#[derive(Debug, Clone, Copy)]
pub struct SimulationStats {
    /// Standard deviation of the additive Gaussian noise (0 when disabled).
    pub gaussian_sigma: f64,
    /// RMS of the noiseless emitter signal (background excluded).
    pub signal_rms: f64,
    /// RMS of the realised stochastic perturbation y - (signal + background).
    pub noise_rms: f64,
    /// 20 log10(signal_rms / noise_rms); infinite when noise-free.
    pub snr_db: f64,
}

/// Synthesises the stack `y_t = clamp(Gauss(Poisson(signal_t + background)))`
/// at 0 from below (intensities are nonnegative by contract).
pub fn simulate_stack(config: &SimulationConfig) -> ImageStack {
    simulate_stack_with_stats(config).0
}

pub fn simulate_stack_with_stats(config: &SimulationConfig) -> (ImageStack, SimulationStats) {
    let t = config.frames;
    let p = config.psf.pixel_count();
    let n = config.ground_truth.len();
    let traces = simulate_amplitude_traces(config);
    let atoms: Vec<Vec<f64>> = config
        .ground_truth
        .spikes()
        .iter()
        .map(|s| atom(s.position, &config.psf).values)
        .collect();
    let bg = config.noise.background_photons;

    // noiseless frames (signal only, background excluded)
    let signal: Vec<Vec<f64>> = par::map_indexed(t, |f| {
        let mut frame = vec![0.0; p];
        for (k, phi) in atoms.iter().enumerate() {
            let amp = traces[f * n + k];
            if amp == 0.0 {
                continue;
            }
            for (v, &w) in frame.iter_mut().zip(phi.iter()) {
                *v += amp * w;
            }
        }
        frame
    });

    let mean_sq = |frames: &[Vec<f64>], offset: f64| -> f64 {
        let total: f64 = frames
            .iter()
            .flat_map(|f| f.iter())
            .map(|v| (v + offset) * (v + offset))
            .sum();
        total / (t * p) as f64
    };
    let signal_rms = mean_sq(&signal, 0.0).sqrt();
    // Gaussian level references the full noiseless stack (signal plus
    // background), the only self-consistent reading of a dB-valued level
    let gaussian_sigma = match config.noise.gaussian_snr_db {
        Some(db) => mean_sq(&signal, bg).sqrt() * 10f64.powf(-db / 20.0),
        None => 0.0,
    };

    let frames: Vec<Vec<f64>> = par::map_indexed(t, |f| {
        let mut rng = stream_rng(config.rng_seed, FRAME_STREAM, f as u64);
        let mut frame = vec![0.0; p];
        for (i, slot) in frame.iter_mut().enumerate() {
            let expected = signal[f][i] + bg;
            assert!(expected >= 0.0, "negative pre-noise intensity");
            let mut v = if config.noise.poisson_enabled && expected > 0.0 {
                Poisson::new(expected).unwrap().sample(&mut rng)
            } else {
                expected
            };
            if gaussian_sigma > 0.0 {
                v += Normal::new(0.0, gaussian_sigma).unwrap().sample(&mut rng);
            }
            *slot = v.max(0.0);
        }
        frame
    });

    let mut noise_sq = 0.0f64;
    let mut flat = Vec::with_capacity(t * p);
    for (f, frame) in frames.iter().enumerate() {
        for (i, &v) in frame.iter().enumerate() {
            let d = v - (signal[f][i] + bg);
            noise_sq += d * d;
            flat.push(v);
        }
    }
    let noise_rms = (noise_sq / (t * p) as f64).sqrt();
    let snr_db = if noise_rms > 0.0 {
        20.0 * (signal_rms / noise_rms).log10()
    } else {
        f64::INFINITY
    };
    let stack = ImageStack::new(flat, t, config.psf.height, config.psf.width, config.frame_rate);
    (
        stack,
        SimulationStats {
            gaussian_sigma,
            signal_rms,
            noise_rms,
            snr_db,
        },
    )
}

/// Variance of the per-frame integrated telegraph amplitude in the
/// stationary (no-bleach) regime. The frame integration low-passes the
/// telegraph process: with correlation time tc = tau_on tau_off /
/// (tau_on + tau_off) and frame length dt, the instantaneous variance
/// A^2 p (1 - p) is multiplied by (2 tc / dt) [1 - (tc / dt)(1 - e^{-dt/tc})].
pub fn stationary_frame_variance(photo: &PhotoPhysics, frame_rate: f64) -> f64 {
    let p = photo.duty_cycle();
    let tc = photo.tau_on * photo.tau_off / (photo.tau_on + photo.tau_off);
    let dt = 1.0 / frame_rate;
    let r = dt / tc;
    let shrink = (2.0 / r) * (1.0 - (1.0 - (-r).exp()) / r);
    photo.photons_on * photo.photons_on * p * (1.0 - p) * shrink
}
