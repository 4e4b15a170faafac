//! Gated fusion of local and global features, and the segmentation head.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{each, BatchNorm, Conv1x1};
use crate::params::{ParamBuilder, ParamId, Session};

/// `local_proj(local) ⊙ σ(gate_proj(g)) + global_proj(g)` with `g` the
/// global feature resized to the local resolution.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub local_proj: Conv1x1,
    pub gate_proj: Conv1x1,
    pub global_proj: Conv1x1,
}

impl GatedFusion {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        local_channels: usize,
        global_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(GatedFusion {
            local_proj: Conv1x1::new(
                &mut pb.scope("local_proj"),
                local_channels,
                out_channels,
                true,
            )?,
            gate_proj: Conv1x1::new(
                &mut pb.scope("gate_proj"),
                global_channels,
                out_channels,
                true,
            )?,
            global_proj: Conv1x1::new(
                &mut pb.scope("global_proj"),
                global_channels,
                out_channels,
                true,
            )?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.local_proj.out_channels
    }

    /// Global feature bilinearly resized to the local map's size.
    pub fn align(&self, s: &mut Session<'_>, local: Var, global: Var) -> Result<Var> {
        let (_, h, w) = s.value(local).chw()?;
        let (_, gh, gw) = s.value(global).chw()?;
        if gh > h || gw > w {
            return Err(Error::shape(format!(
                "global feature {gh}x{gw} is larger than local feature {h}x{w}"
            )));
        }
        s.tape.upsample(global, h, w)
    }

    /// The sigmoid gate on the aligned global feature.
    pub fn gate(&self, s: &mut Session<'_>, aligned: Var) -> Result<Var> {
        let g = self.gate_proj.forward(s, aligned)?;
        s.tape.sigmoid(g)
    }

    pub fn forward(&self, s: &mut Session<'_>, local: Var, global: Var) -> Result<Var> {
        let aligned = self.align(s, local, global)?;
        let l = self.local_proj.forward(s, local)?;
        let gate = self.gate(s, aligned)?;
        let gated = s.tape.mul(l, gate)?;
        let residual = self.global_proj.forward(s, aligned)?;
        s.tape.add(gated, residual)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.local_proj.params();
        p.extend(self.gate_proj.params());
        p.extend(self.global_proj.params());
        p
    }
}

/// `conv_b(relu(bn(conv_a(x))))`, upsampled to the requested size.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    pub conv_a: Conv1x1,
    pub bn: BatchNorm,
    pub conv_b: Conv1x1,
}

impl SegmentationHead {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, num_classes: usize) -> Result<Self> {
        Ok(SegmentationHead {
            conv_a: Conv1x1::new(&mut pb.scope("conv_a"), channels, channels, false)?,
            bn: BatchNorm::new(&mut pb.scope("bn"), channels)?,
            conv_b: Conv1x1::new(&mut pb.scope("conv_b"), channels, num_classes, true)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.conv_b.out_channels
    }

    /// Logits at the head's own resolution.
    pub fn logits(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        Ok(self.logits_batch(s, &[x])?.remove(0))
    }

    pub fn logits_batch(&self, s: &mut Session<'_>, xs: &[Var]) -> Result<Vec<Var>> {
        let y = each(xs, |x| self.conv_a.forward(s, x))?;
        let y = self.bn.forward_batch(s, &y)?;
        each(&y, |v| {
            let v = s.tape.relu(v)?;
            self.conv_b.forward(s, v)
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        Ok(self.forward_batch(s, &[x], out_h, out_w)?.remove(0))
    }

    pub fn forward_batch(
        &self,
        s: &mut Session<'_>,
        xs: &[Var],
        out_h: usize,
        out_w: usize,
    ) -> Result<Vec<Var>> {
        let y = self.logits_batch(s, xs)?;
        each(&y, |v| s.tape.upsample(v, out_h, out_w))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv_a.params();
        p.extend(self.bn.params());
        p.extend(self.conv_b.params());
        p
    }
}

/// Per-pixel argmax over the class axis of `K×H×W` logits; ties pick the
/// lowest class id.
pub fn argmax_labels(logits: &crate::tensor::Tensor) -> Result<Vec<u32>> {
    let (k, h, w) = logits.chw()?;
    let plane = h * w;
    let d = logits.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{self, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gfm(store: &mut ParamStore, seed: u64) -> GatedFusion {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GatedFusion::new(&mut ParamBuilder::new(store, &mut rng), 8, 8, 6).unwrap();
        for id in g.params() {
            if store.entry(id).kind == crate::params::ParamKind::Bias {
                for v in store.get_mut(id).data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        g
    }

    fn conv(store: &ParamStore, c: &Conv1x1, x: &Tensor) -> Tensor {
        tensor::conv1x1(x, store.get(c.weight), c.bias.map(|b| store.get(b))).unwrap()
    }

    fn inputs(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (rand_t(&mut rng, &[8, 16, 16]), rand_t(&mut rng, &[8, 8, 8]))
    }

    fn fuse(store: &ParamStore, g: &GatedFusion, local: &Tensor, global: &Tensor) -> Tensor {
        let mut s = Session::eval(store);
        let l = s.input(local.clone());
        let gl = s.input(global.clone());
        let y = g.forward(&mut s, l, gl).unwrap();
        s.value(y).clone()
    }

    #[test]
    fn composition_oracle() {
        let mut store = ParamStore::new();
        let g = gfm(&mut store, 1);
        let (local, global) = inputs(2);
        let up = tensor::bilinear_upsample(&global, 16, 16).unwrap();
        let gate = tensor::sigmoid(&conv(&store, &g.gate_proj, &up));
        let want = tensor::add(
            &tensor::mul(&conv(&store, &g.local_proj, &local), &gate).unwrap(),
            &conv(&store, &g.global_proj, &up),
        )
        .unwrap();
        let got = fuse(&store, &g, &local, &global);
        assert_eq!(got.shape(), &[6, 16, 16]);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_gate_halves_local_path() {
        let mut store = ParamStore::new();
        let g = gfm(&mut store, 3);
        for id in g.gate_proj.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (local, global) = inputs(4);
        let up = tensor::bilinear_upsample(&global, 16, 16).unwrap();
        let want = tensor::add(
            &tensor::scale(&conv(&store, &g.local_proj, &local), 0.5),
            &conv(&store, &g.global_proj, &up),
        )
        .unwrap();
        assert!(fuse(&store, &g, &local, &global).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_local_leaves_global_path() {
        let mut store = ParamStore::new();
        let g = gfm(&mut store, 5);
        store
            .get_mut(g.local_proj.bias.unwrap())
            .data_mut()
            .fill(0.0);
        let (_, global) = inputs(6);
        let local = Tensor::zeros(&[8, 16, 16]).unwrap();
        let up = tensor::bilinear_upsample(&global, 16, 16).unwrap();
        let want = conv(&store, &g.global_proj, &up);
        assert!(fuse(&store, &g, &local, &global).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn saturated_gates_reach_their_limits() {
        let (local, global) = inputs(8);
        for (bias, open) in [(40.0, true), (-40.0, false)] {
            let mut store = ParamStore::new();
            let g = gfm(&mut store, 7);
            store.get_mut(g.gate_proj.weight).data_mut().fill(0.0);
            store
                .get_mut(g.gate_proj.bias.unwrap())
                .data_mut()
                .fill(bias);
            let up = tensor::bilinear_upsample(&global, 16, 16).unwrap();
            let residual = conv(&store, &g.global_proj, &up);
            let want = if open {
                tensor::add(&conv(&store, &g.local_proj, &local), &residual).unwrap()
            } else {
                residual
            };
            assert!(fuse(&store, &g, &local, &global).max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn gate_lies_in_open_interval() {
        let mut store = ParamStore::new();
        let g = gfm(&mut store, 9);
        let (_, global) = inputs(10);
        let mut s = Session::eval(&store);
        let gv = s.input(global);
        let gate = g.gate(&mut s, gv).unwrap();
        assert!(s.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn larger_global_is_rejected() {
        let mut store = ParamStore::new();
        let g = gfm(&mut store, 11);
        let mut s = Session::eval(&store);
        let l = s.input(Tensor::zeros(&[8, 4, 4]).unwrap());
        let gl = s.input(Tensor::zeros(&[8, 8, 8]).unwrap());
        assert!(matches!(g.forward(&mut s, l, gl), Err(Error::Shape(_))));
        let bad = s.input(Tensor::zeros(&[5, 2, 2]).unwrap());
        assert!(matches!(g.forward(&mut s, l, bad), Err(Error::Shape(_))));
    }

    fn head(store: &mut ParamStore, classes: usize) -> SegmentationHead {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        SegmentationHead::new(&mut ParamBuilder::new(store, &mut rng), 4, classes).unwrap()
    }

    #[test]
    fn single_class_head_shape() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 1);
        let mut s = Session::eval(&store);
        let x = s.input(rand_t(&mut ChaCha8Rng::seed_from_u64(13), &[4, 4, 4]));
        let y = h.forward(&mut s, x, 32, 32).unwrap();
        assert_eq!(s.value(y).shape(), &[1, 32, 32]);
    }

    #[test]
    fn zero_weights_give_bias_planes() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3);
        store.get_mut(h.conv_a.weight).data_mut().fill(0.0);
        store.get_mut(h.conv_b.weight).data_mut().fill(0.0);
        let b = [0.3, -1.0, 0.7];
        store
            .get_mut(h.conv_b.bias.unwrap())
            .data_mut()
            .copy_from_slice(&b);
        let mut s = Session::eval(&store);
        let x = s.input(rand_t(&mut ChaCha8Rng::seed_from_u64(14), &[4, 4, 4]));
        let y = h.forward(&mut s, x, 16, 16).unwrap();
        for (c, plane) in s.value(y).data().chunks(256).enumerate() {
            assert!(plane.iter().all(|&v| (v - b[c]).abs() < 1e-15));
        }
        assert!(argmax_labels(s.value(y)).unwrap().iter().all(|&l| l == 2));
    }

    #[test]
    fn head_composition_oracle() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 5);
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(15), &[4, 4, 4]);
        let a = conv(&store, &h.conv_a, &x);
        let k = 1.0 / (1.0 + crate::nn::BN_EPS).sqrt();
        let want = tensor::bilinear_upsample(
            &conv(&store, &h.conv_b, &tensor::relu(&tensor::scale(&a, k))),
            8,
            8,
        )
        .unwrap();
        let mut s = Session::eval(&store);
        let xv = s.input(x);
        let y = h.forward(&mut s, xv, 8, 8).unwrap();
        assert!(s.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![0, 1]);
    }
}
