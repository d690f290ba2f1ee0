use rand::Rng;

use super::{add_uniform, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{invalid, ParamGroup, ParamId, ParamStore, Result, Tensor};

/// Fully connected layer `y = x W + b` on `[n, din]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = add_uniform(store, rng, &format!("{name}.weight"), &[din, dout], din, group);
        let bias = add_uniform(store, rng, &format!("{name}.bias"), &[dout], din, group);
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        x.matmul(&ctx.param(self.weight))?.add(&ctx.param(self.bias))
    }

    /// Overwrites weights with zeros and the bias with `bias`.
    pub fn set_constant_output<T: Scalar>(&self, store: &mut ParamStore<T>, bias: &[T]) {
        assert_eq!(bias.len(), self.dout);
        store.value_mut(self.weight).iter_mut().for_each(|w| *w = T::zero());
        store.value_mut(self.bias).copy_from_slice(bias);
    }

    /// Scales the weights by `factor` and overwrites the bias.
    pub fn shrink_with_bias<T: Scalar>(&self, store: &mut ParamStore<T>, factor: T, bias: &[T]) {
        assert_eq!(bias.len(), self.dout);
        store.value_mut(self.weight).iter_mut().for_each(|w| *w *= factor);
        store.value_mut(self.bias).copy_from_slice(bias);
    }
}

/// Multi-layer perceptron with tanh hidden activations and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        hidden: &[usize],
        dout: usize,
        group: ParamGroup,
    ) -> Self {
        let mut widths = vec![din];
        widths.extend_from_slice(hidden);
        widths.push(dout);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], group))
            .collect();
        Self { layers }
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, &h)?;
            if i + 1 < self.layers.len() {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    pub fn output(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Two 3x3 convolutions (tanh) followed by a per-input-size linear head with
/// tanh output. The convolutions are shared between input sizes.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    convs: Vec<(ParamId, ParamId)>,
    heads: Vec<(usize, usize, Linear)>,
    pub channels: Vec<usize>,
    pub features: usize,
}

impl CnnEncoder {
    /// `sizes` lists the `(height, width)` inputs the encoder accepts.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: &[usize],
        sizes: &[(usize, usize)],
        features: usize,
        group: ParamGroup,
    ) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = cin * 9;
            let w = add_uniform(store, rng, &format!("{name}.conv{i}.weight"), &[cout, cin, 3, 3], fan_in, group);
            let b = add_uniform(store, rng, &format!("{name}.conv{i}.bias"), &[cout], fan_in, group);
            convs.push((w, b));
            cin = cout;
        }
        let mut uniq: Vec<(usize, usize)> = Vec::new();
        for &s in sizes {
            if !uniq.contains(&s) {
                uniq.push(s);
            }
        }
        let heads = uniq
            .into_iter()
            .map(|(h, w)| {
                let lin = Linear::new(store, rng, &format!("{name}.head{h}x{w}"), cin * h * w, features, group);
                (h, w, lin)
            })
            .collect();
        Self {
            convs,
            heads,
            channels: channels.to_vec(),
            features,
        }
    }

    /// Encodes images `[n, h, w]` into features `[n, features]`.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, img: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let shape = img.shape();
        if shape.len() != 3 {
            return Err(invalid("cnn_encoder", format!("expected [n, h, w], got {shape:?}")));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let head = self
            .heads
            .iter()
            .find(|(hh, ww, _)| *hh == h && *ww == w)
            .map(|(_, _, l)| l)
            .ok_or_else(|| invalid("cnn_encoder", format!("no head for {h}x{w} inputs")))?;
        let mut x = img.reshape(&[n, 1, h, w])?;
        for &(wt, b) in &self.convs {
            x = x.conv2d_3x3(&ctx.param(wt), &ctx.param(b))?.tanh();
        }
        let c = *self.channels.last().unwrap_or(&1);
        Ok(head.forward(ctx, &x.reshape(&[n, c * h * w])?)?.tanh())
    }
}

/// Gated recurrent unit:
/// `z = sig(x Wz + h Uz + bz)`, `r = sig(x Wr + h Ur + br)`,
/// `c = tanh(x Wc + r * (h Uc) + bc)`, `h' = (1 - z) * c + z * h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    pub din: usize,
    pub dh: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dh: usize,
        group: ParamGroup,
    ) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.input"), din, 3 * dh, group);
        let hidden = Linear::new(store, rng, &format!("{name}.hidden"), dh, 3 * dh, group);
        Self { input, hidden, din, dh }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: &Tensor<'g, T>,
        h: &Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        let gx = self.input.forward(ctx, x)?;
        let gh = self.hidden.forward(ctx, h)?;
        let d = self.dh;
        let z = gx.slice(1, 0, d)?.add(&gh.slice(1, 0, d)?)?.sigmoid();
        let r = gx.slice(1, d, d)?.add(&gh.slice(1, d, d)?)?.sigmoid();
        let c = gx.slice(1, 2 * d, d)?.add(&r.mul(&gh.slice(1, 2 * d, d)?)?)?.tanh();
        // h' = c + z * (h - c)
        c.add(&z.mul(&h.sub(&c)?)?)
    }
}
