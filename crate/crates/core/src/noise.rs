//! Wiener increments `ΔW` and their time integrals `ΔZ = ∫∫ dW dt`.
//!
//! Per step and channel two independent standard normals `χ, η` are drawn
//! (in that order; `η` only when `ΔZ` is requested) and mapped to
//!
//! ```text
//! ΔW = χ √Δt,    ΔZ = ½ Δt^{3/2} (χ + η/√3)
//! ```
//!
//! Paths are sampled once at the finest step and merged with [`WienerPath::coarsen`].

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// One step's increments for a single channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementPair {
    pub dw: f64,
    pub dz: Option<f64>,
}

impl IncrementPair {
    /// Map standard normals `(χ, η)` to `(ΔW, ΔZ)` at step `dt`.
    pub fn from_normals(chi: f64, eta: f64, dt: f64) -> Self {
        let sq = libm::sqrt(dt);
        IncrementPair {
            dw: chi * sq,
            dz: Some(0.5 * dt * sq * (chi + eta / libm::sqrt(3.0))),
        }
    }
}

/// Borrowed increments of one step, one entry per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increments<'a> {
    pub dw: &'a [f64],
    pub dz: Option<&'a [f64]>,
}

impl<'a> Increments<'a> {
    pub fn new(dw: &'a [f64]) -> Self {
        Increments { dw, dz: None }
    }

    pub fn with_dz(dw: &'a [f64], dz: &'a [f64]) -> Self {
        Increments { dw, dz: Some(dz) }
    }
}

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of trial `index` in a run with master `seed`. Independent of
/// scheduling, so parallel runs reproduce sequential ones.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Clamp `dw` to `[-a, a]`.
pub fn truncate_increment(dw: f64, a: f64) -> f64 {
    debug_assert!(a > 0.0);
    dw.clamp(-a, a)
}

/// Default truncation level for the open-trapezoid scheme on the Kubo
/// oscillator, where the stage system is singular at `Δt + βΔW = 3`.
pub fn kubo_truncation_bound(dt: f64, beta: f64) -> f64 {
    (3.0 - dt) / (2.0 * beta.abs())
}

/// Increments on a uniform grid, stored step-major (`index = k * M + m`).
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub seed: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub channels: usize,
    pub dw: Vec<f64>,
    pub dz: Option<Vec<f64>>,
}

impl WienerPath {
    /// Sample `n_steps` steps of `channels` independent channels.
    pub fn sample(seed: u64, n_steps: usize, dt: f64, channels: usize, with_dz: bool) -> Result<Self> {
        validate(n_steps, dt, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n_steps * channels;
        let mut dw = Vec::with_capacity(len);
        let mut dz = if with_dz { Some(Vec::with_capacity(len)) } else { None };
        let sq = libm::sqrt(dt);
        let zs = 0.5 * dt * sq;
        let inv_sqrt3 = 1.0 / libm::sqrt(3.0);
        for _ in 0..len {
            let chi: f64 = StandardNormal.sample(&mut rng);
            dw.push(chi * sq);
            if let Some(z) = dz.as_mut() {
                let eta: f64 = StandardNormal.sample(&mut rng);
                z.push(zs * (chi + eta * inv_sqrt3));
            }
        }
        Ok(WienerPath {
            seed,
            dt,
            n_steps,
            channels,
            dw,
            dz,
        })
    }

    /// A path from given increments.
    pub fn from_increments(dt: f64, channels: usize, dw: Vec<f64>, dz: Option<Vec<f64>>) -> Result<Self> {
        if channels == 0 || !dw.len().is_multiple_of(channels) {
            return Err(Error::InvalidArgument(
                "increment count must be a multiple of the channel count",
            ));
        }
        let n_steps = dw.len() / channels;
        validate(n_steps, dt, channels)?;
        if let Some(z) = &dz {
            if z.len() != dw.len() {
                return Err(Error::DimensionMismatch {
                    what: "dZ increments",
                    expected: dw.len(),
                    found: z.len(),
                });
            }
        }
        Ok(WienerPath {
            seed: 0,
            dt,
            n_steps,
            channels,
            dw,
            dz,
        })
    }

    pub fn has_dz(&self) -> bool {
        self.dz.is_some()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Increments of step `k`.
    pub fn step(&self, k: usize) -> Increments<'_> {
        let r = k * self.channels..(k + 1) * self.channels;
        Increments {
            dw: &self.dw[r.clone()],
            dz: self.dz.as_ref().map(|z| &z[r]),
        }
    }

    pub fn pair(&self, k: usize, m: usize) -> IncrementPair {
        let i = k * self.channels + m;
        IncrementPair {
            dw: self.dw[i],
            dz: self.dz.as_ref().map(|z| z[i]),
        }
    }

    /// `W_m(t_k)`, with `W(0) = 0`.
    pub fn value(&self, k: usize, m: usize) -> f64 {
        (0..k).map(|j| self.dw[j * self.channels + m]).sum()
    }

    /// Merge groups of `factor` consecutive steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::InvalidArgument("coarsening factor must divide the step count"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let m = self.channels;
        let n_steps = self.n_steps / factor;
        let mut dw = Vec::with_capacity(n_steps * m);
        let mut dz = self.dz.as_ref().map(|_| Vec::with_capacity(n_steps * m));
        for k in 0..n_steps {
            for c in 0..m {
                let mut w = 0.0;
                let mut z = 0.0;
                for j in 0..factor {
                    let i = (k * factor + j) * m + c;
                    if let Some(fz) = &self.dz {
                        // Z over [0, a+δ] = Z[0,a] + Z[a,a+δ] + W[0,a] δ
                        z += fz[i] + w * self.dt;
                    }
                    w += self.dw[i];
                }
                dw.push(w);
                if let Some(out) = dz.as_mut() {
                    out.push(z);
                }
            }
        }
        Ok(WienerPath {
            seed: self.seed,
            dt: self.dt * factor as f64,
            n_steps,
            channels: m,
            dw,
            dz,
        })
    }

    /// Clamp every `ΔW` to `[-a, a]`. `ΔZ` is left unchanged.
    pub fn truncated(&self, a: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidArgument("truncation level must be positive"));
        }
        let mut out = self.clone();
        out.dw.iter_mut().for_each(|x| *x = truncate_increment(*x, a));
        Ok(out)
    }

    /// Little-endian binary dump: header `seed u64, K u64, dt f64, M u64,
    /// with_dz u8`, then all `ΔW`, then all `ΔZ` if present.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.dw.len() * if self.has_dz() { 2 } else { 1 };
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.n_steps as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&(self.channels as u64).to_le_bytes());
        out.push(self.has_dz() as u8);
        for x in &self.dw {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(z) = &self.dz {
            for x in z {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::InvalidArgument("path dump shorter than its header"));
        }
        let u = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let seed = u(0);
        let n_steps = u(8) as usize;
        let dt = f64::from_bits(u(16));
        let channels = u(24) as usize;
        let with_dz = match bytes[32] {
            0 => false,
            1 => true,
            _ => return Err(Error::InvalidArgument("path dump has a bad dZ flag")),
        };
        validate(n_steps, dt, channels)?;
        let len = n_steps
            .checked_mul(channels)
            .ok_or(Error::InvalidArgument("path dump header overflows"))?;
        let want = HEADER_LEN + 8 * len * if with_dz { 2 } else { 1 };
        if bytes.len() != want {
            return Err(Error::DimensionMismatch {
                what: "path dump bytes",
                expected: want,
                found: bytes.len(),
            });
        }
        let read = |start: usize| -> Vec<f64> {
            bytes[start..start + 8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let dw = read(HEADER_LEN);
        let dz = with_dz.then(|| read(HEADER_LEN + 8 * len));
        Ok(WienerPath {
            seed,
            dt,
            n_steps,
            channels,
            dw,
            dz,
        })
    }
}

const HEADER_LEN: usize = 33;

fn validate(n_steps: usize, dt: f64, channels: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("path needs at least one step"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument("step size must be positive and finite"));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument("path needs at least one channel"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn injected_normals() {
        let pair = IncrementPair::from_normals(1.0, 0.0, 4.0);
        assert_eq!(pair.dw, 2.0);
        assert_eq!(pair.dz, Some(4.0));
    }

    #[test]
    fn sample_moments() {
        let dt = 0.01;
        let n = 100_000;
        let path = WienerPath::sample(7, n, dt, 1, true).unwrap();
        let dz = path.dz.as_ref().unwrap();
        let nf = n as f64;
        let mw = path.dw.iter().sum::<f64>() / nf;
        let mz = dz.iter().sum::<f64>() / nf;
        let vw = path.dw.iter().map(|x| (x - mw) * (x - mw)).sum::<f64>() / (nf - 1.0);
        let vz = dz.iter().map(|x| (x - mz) * (x - mz)).sum::<f64>() / (nf - 1.0);
        let cov = path.dw.iter().zip(dz).map(|(a, b)| (a - mw) * (b - mz)).sum::<f64>() / (nf - 1.0);
        // three standard errors of the sample mean
        assert!(mw.abs() <= 3.0 * libm::sqrt(dt / nf));
        assert!(mz.abs() <= 3.0 * libm::sqrt(dt * dt * dt / 3.0 / nf));
        assert!((vw / dt - 1.0).abs() <= 0.02, "{vw}");
        assert!((vz / (dt * dt * dt / 3.0) - 1.0).abs() <= 0.05, "{vz}");
        assert!((cov / (dt * dt / 2.0) - 1.0).abs() <= 0.05, "{cov}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = WienerPath::sample(99, 50, 0.1, 2, true).unwrap();
        let b = WienerPath::sample(99, 50, 0.1, 2, true).unwrap();
        assert_eq!(a, b);
        let c = WienerPath::sample(100, 50, 0.1, 2, true).unwrap();
        assert_ne!(a.dw, c.dw);
        // the dW stream does not depend on whether dZ is drawn beyond the interleaving
        let d = WienerPath::sample(99, 50, 0.1, 2, false).unwrap();
        assert_eq!(d.dz, None);
    }

    #[test]
    fn sample_validates_arguments() {
        assert!(WienerPath::sample(1, 0, 0.1, 1, false).is_err());
        assert!(WienerPath::sample(1, 1, 0.0, 1, false).is_err());
        assert!(WienerPath::sample(1, 1, 0.1, 0, false).is_err());
    }

    #[test]
    fn coarsen_sums_dw() {
        let p = WienerPath::from_increments(0.5, 1, vec![0.1, -0.2], None).unwrap();
        let c = p.coarsen(2).unwrap();
        assert!((c.dw[0] + 0.1).abs() < 1e-16);
        assert_eq!(c.dt, 1.0);
        assert!(p.coarsen(3).is_err());
        assert_eq!(p.coarsen(1).unwrap(), p);
    }

    #[test]
    fn coarsen_merges_dz() {
        let p = WienerPath::from_increments(1.0, 1, vec![1.0, 0.0], Some(vec![0.3, 0.1])).unwrap();
        let c = p.coarsen(2).unwrap();
        assert!((c.dz.unwrap()[0] - 1.4).abs() < 1e-15);
    }

    /// `∫_0^T W dt` by the trapezoid rule on a much finer Brownian path.
    #[test]
    fn coarsened_dz_matches_riemann_sum() {
        let fine = WienerPath::sample(5, 4096, 1e-4, 1, false).unwrap();
        let w: Vec<f64> = core::iter::once(0.0)
            .chain(fine.dw.iter().scan(0.0, |acc, x| {
                *acc += x;
                Some(*acc)
            }))
            .collect();
        // Exact ΔZ of each sub-step of a piecewise-linear path is dt·dW/2.
        let dz: Vec<f64> = fine.dw.iter().map(|x| 0.5 * fine.dt * x).collect();
        let p = WienerPath::from_increments(fine.dt, 1, fine.dw.clone(), Some(dz)).unwrap();
        let merged = p.coarsen(4096).unwrap();
        let riemann: f64 = w.windows(2).map(|s| 0.5 * (s[0] + s[1]) * fine.dt).sum();
        assert!((merged.dz.unwrap()[0] - riemann).abs() <= 1e-12);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_increment(5.0, 2.0), 2.0);
        assert_eq!(truncate_increment(-0.3, 2.0), -0.3);
        assert_eq!(truncate_increment(-5.0, 2.0), -2.0);
        assert!(WienerPath::sample(1, 4, 1.0, 1, false).unwrap().truncated(0.0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        for with_dz in [false, true] {
            let p = WienerPath::sample(3, 17, 0.03, 2, with_dz).unwrap();
            let bytes = p.to_bytes();
            assert_eq!(bytes.len(), 33 + 8 * 34 * if with_dz { 2 } else { 1 });
            assert_eq!(WienerPath::from_bytes(&bytes).unwrap(), p);
            assert!(WienerPath::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn trial_seeds_differ() {
        let mut seen: Vec<u64> = (0..1000).map(|i| trial_seed(42, i)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 1000);
        assert_ne!(trial_seed(1, 0), trial_seed(2, 0));
    }

    proptest! {
        #[test]
        fn coarsening_composes(seed in any::<u64>(), f1 in 1usize..5, f2 in 1usize..5, mult in 1usize..4) {
            let k = f1 * f2 * mult;
            let p = WienerPath::sample(seed, k, 0.01, 2, true).unwrap();
            let a = p.coarsen(f1).unwrap().coarsen(f2).unwrap();
            let b = p.coarsen(f1 * f2).unwrap();
            prop_assert!((a.dt - b.dt).abs() <= 1e-15);
            let (za, zb) = (a.dz.unwrap(), b.dz.unwrap());
            for (x, y) in a.dw.iter().zip(&b.dw).chain(za.iter().zip(&zb)) {
                prop_assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn terminal_value_survives_coarsening(seed in any::<u64>(), f in 1usize..9) {
            let p = WienerPath::sample(seed, 8 * f, 0.02, 1, false).unwrap();
            let c = p.coarsen(f).unwrap();
            prop_assert!((p.value(p.n_steps, 0) - c.value(c.n_steps, 0)).abs() <= 1e-12);
        }

        #[test]
        fn truncation_idempotent(x in -1e3f64..1e3, a in 1e-3f64..10.0) {
            let once = truncate_increment(x, a);
            prop_assert_eq!(truncate_increment(once, a), once);
            prop_assert!(once.abs() <= a);
        }
    }
}
