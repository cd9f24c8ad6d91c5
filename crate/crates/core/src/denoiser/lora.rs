//! Low-rank weight deltas `W + (α/r)·B·A`.

use std::ops::Range;

use super::DenoiserParams;
use crate::error::{Error, Result};
use crate::rng::{normal, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraLayer {
    /// Index of the adapted layer in the network.
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// `A`: rank × cols, row-major.
    pub a: Range<usize>,
    /// `B`: rows × rank, row-major.
    pub b: Range<usize>,
}

/// Adapters for a subset of the network's weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    rank: usize,
    alpha: f64,
    enabled: bool,
    layers: Vec<LoraLayer>,
    values: Vec<f64>,
}

impl LoraSet {
    /// `A ~ N(0, 1/r)`, `B = 0`; adapters start disabled.
    pub fn attach(
        params: &DenoiserParams,
        selection: &[usize],
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut set = Self::zeros(params, selection, rank, alpha)?;
        let std = (1.0 / rank as f64).sqrt();
        for l in set.layers.clone() {
            for v in &mut set.values[l.a] {
                *v = std * normal(rng);
            }
        }
        Ok(set)
    }

    /// All-zero adapters with the given structure.
    pub fn zeros(
        params: &DenoiserParams,
        selection: &[usize],
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Parameter("LoRA rank must be >= 1".into()));
        }
        let n_layers = params.layout().layers.len();
        let mut sorted = selection.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != selection.len() {
            return Err(Error::Parameter(format!(
                "invalid LoRA layer selection {selection:?}"
            )));
        }
        let mut at = 0;
        let mut layers = Vec::with_capacity(sorted.len());
        for &li in &sorted {
            let Some(l) = params.layout().layers.get(li) else {
                return Err(Error::Parameter(format!(
                    "LoRA layer {li} does not exist (network has {n_layers})"
                )));
            };
            let a = at..at + rank * l.cols;
            at = a.end;
            let b = at..at + l.rows * rank;
            at = b.end;
            layers.push(LoraLayer {
                layer: li,
                rows: l.rows,
                cols: l.cols,
                a,
                b,
            });
        }
        Ok(Self {
            rank,
            alpha,
            enabled: false,
            layers,
            values: vec![0.0; at],
        })
    }

    pub fn from_values(
        params: &DenoiserParams,
        selection: &[usize],
        rank: usize,
        alpha: f64,
        enabled: bool,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut set = Self::zeros(params, selection, rank, alpha)?;
        if values.len() != set.values.len() {
            return Err(Error::shape(set.values.len(), values.len()));
        }
        set.values = values;
        set.enabled = enabled;
        Ok(set)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    pub fn selection(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn layer(&self, index: usize) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.layer == index)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn a(&self, l: &LoraLayer) -> &[f64] {
        &self.values[l.a.clone()]
    }

    pub fn b(&self, l: &LoraLayer) -> &[f64] {
        &self.values[l.b.clone()]
    }

    pub fn b_mut(&mut self, l: &LoraLayer) -> &mut [f64] {
        &mut self.values[l.b.clone()]
    }

    pub fn a_mut(&mut self, l: &LoraLayer) -> &mut [f64] {
        &mut self.values[l.a.clone()]
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        vec![true; self.values.len()]
    }

    /// Dense `(α/r)·B·A` for one adapted layer, row-major.
    pub fn delta(&self, l: &LoraLayer) -> Vec<f64> {
        let (a, b, r, s) = (self.a(l), self.b(l), self.rank, self.scaling());
        let mut out = vec![0.0; l.rows * l.cols];
        for i in 0..l.rows {
            for k in 0..r {
                let bik = s * b[i * r + k];
                if bik == 0.0 {
                    continue;
                }
                let arow = &a[k * l.cols..(k + 1) * l.cols];
                for (o, av) in out[i * l.cols..(i + 1) * l.cols].iter_mut().zip(arow) {
                    *o += bik * av;
                }
            }
        }
        out
    }

    pub(crate) fn check_compatible(&self, params: &DenoiserParams) -> Result<()> {
        for l in &self.layers {
            match params.layout().layers.get(l.layer) {
                Some(p) if p.rows == l.rows && p.cols == l.cols => {}
                _ => {
                    return Err(Error::shape(
                        format!("layer {} of {}x{}", l.layer, l.rows, l.cols),
                        "incompatible network",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Fold the deltas into a copy of `params`.
    pub fn merge_into(&self, params: &DenoiserParams) -> Result<DenoiserParams> {
        self.check_compatible(params)?;
        let mut merged = params.clone();
        for l in &self.layers {
            let delta = self.delta(l);
            let range = params.layout().layers[l.layer].weight.clone();
            for (w, d) in merged.values_mut()[range].iter_mut().zip(&delta) {
                *w += d;
            }
        }
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{predict_eps, Architecture};
    use crate::image::{Image, Shape};
    use crate::rng::{normal_vec, seeded};

    fn setup() -> DenoiserParams {
        let arch = Architecture::new(Shape::new(2, 2, 1), 4, 3, 2, vec![4, 4]);
        DenoiserParams::init(arch, &mut seeded(3)).unwrap()
    }

    #[test]
    fn zero_b_is_transparent() {
        let p = setup();
        let mut set = LoraSet::attach(&p, &[0, 1, 2], 2, 4.0, &mut seeded(9)).unwrap();
        set.set_enabled(true);
        let mut rng = seeded(5);
        for t in 1..=4 {
            let z = Image::from_vec(Shape::new(2, 2, 1), normal_vec(&mut rng, 4)).unwrap();
            let c = normal_vec(&mut rng, 3);
            let plain = predict_eps(&p, None, &z, t, &c).unwrap();
            let adapted = predict_eps(&p, Some(&set), &z, t, &c).unwrap();
            assert_eq!(plain.as_slice(), adapted.as_slice());
        }
        assert_eq!(set.merge_into(&p).unwrap(), p);
    }

    #[test]
    fn rank_one_delta_is_outer_product() {
        let p = setup();
        let mut set = LoraSet::zeros(&p, &[1], 1, 3.0).unwrap();
        let l = set.layers()[0].clone();
        set.a_mut(&l).copy_from_slice(&[1.0, 2.0, 0.0, -1.0]);
        set.b_mut(&l).copy_from_slice(&[0.5, 0.0, -2.0, 1.0]);
        let d = set.delta(&l);
        let (u, v) = ([1.0, 2.0, 0.0, -1.0], [0.5, 0.0, -2.0, 1.0]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[i * 4 + j], 3.0 * v[i] * u[j]);
            }
        }
    }

    #[test]
    fn delta_rank_is_bounded() {
        let p = setup();
        let mut set = LoraSet::attach(&p, &[1], 2, 2.0, &mut seeded(1)).unwrap();
        let l = set.layers()[0].clone();
        let b = normal_vec(&mut seeded(2), l.rows * 2);
        set.b_mut(&l).copy_from_slice(&b);
        assert!(matrix_rank(&set.delta(&l), 4, 4) <= 2);
    }

    #[test]
    fn full_rank_adapter_reaches_any_delta() {
        // with r = min(m, n), choosing A = I and B = target / s reproduces any delta
        let p = setup();
        let mut set = LoraSet::zeros(&p, &[1], 4, 2.0).unwrap();
        let l = set.layers()[0].clone();
        let target = normal_vec(&mut seeded(8), 16);
        let mut a = vec![0.0; 16];
        (0..4).for_each(|i| a[i * 4 + i] = 1.0);
        set.a_mut(&l).copy_from_slice(&a);
        let s = set.scaling();
        let b: Vec<f64> = target.iter().map(|v| v / s).collect();
        set.b_mut(&l).copy_from_slice(&b);
        for (d, t) in set.delta(&l).iter().zip(&target) {
            assert!((d - t).abs() < 1e-14);
        }
    }

    #[test]
    fn merge_matches_adapter_forward() {
        let p = setup();
        let mut set = LoraSet::attach(&p, &[0, 2], 2, 1.5, &mut seeded(4)).unwrap();
        let mut rng = seeded(6);
        for l in set.layers().to_vec() {
            let b = normal_vec(&mut rng, l.rows * 2);
            set.b_mut(&l).copy_from_slice(&b);
        }
        set.set_enabled(true);
        let merged = set.merge_into(&p).unwrap();
        for _ in 0..10 {
            let z = Image::from_vec(Shape::new(2, 2, 1), normal_vec(&mut rng, 4)).unwrap();
            let c = normal_vec(&mut rng, 3);
            let a = predict_eps(&merged, None, &z, 2, &c).unwrap();
            let b = predict_eps(&p, Some(&set), &z, 2, &c).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn invalid_selection() {
        let p = setup();
        assert!(LoraSet::attach(&p, &[3], 2, 1.0, &mut seeded(0)).is_err());
        assert!(LoraSet::attach(&p, &[], 2, 1.0, &mut seeded(0)).is_err());
        assert!(LoraSet::attach(&p, &[0], 0, 1.0, &mut seeded(0)).is_err());
    }

    fn matrix_rank(m: &[f64], rows: usize, cols: usize) -> usize {
        let mut a = m.to_vec();
        let mut rank = 0;
        for c in 0..cols {
            let Some(piv) = (rank..rows)
                .max_by(|&x, &y| a[x * cols + c].abs().total_cmp(&a[y * cols + c].abs()))
            else {
                break;
            };
            if a[piv * cols + c].abs() < 1e-10 {
                continue;
            }
            for k in 0..cols {
                a.swap(rank * cols + k, piv * cols + k);
            }
            for r in 0..rows {
                if r != rank {
                    let f = a[r * cols + c] / a[rank * cols + c];
                    for k in 0..cols {
                        a[r * cols + k] -= f * a[rank * cols + k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }
}
