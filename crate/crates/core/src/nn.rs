//! Layers built from tape ops, holding their weights in a [`ParamStore`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kaiming-uniform init for ReLU networks: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Square convolution with "same" padding (`kernel / 2`).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
        )?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_ch]))?);
        Ok(Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        })
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.kernel / 2)
    }
}

/// Two stacked 3×3 convolutions with a residual connection. The shortcut is
/// a strided 1×1 convolution whenever shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub final_relu: bool,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, rng)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, rng)?;
        let skip = if stride != 1 || in_ch != out_ch {
            Some(Conv2d::new(
                store,
                &format!("{name}.skip"),
                in_ch,
                out_ch,
                1,
                stride,
                rng,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            conv1,
            conv2,
            skip,
            final_relu,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.conv2.num_params()
            + self.skip.as_ref().map_or(0, Conv2d::num_params)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, store, x)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(tape, store, x)?,
            None => x,
        };
        let y = tape.add(y, shortcut)?;
        Ok(if self.final_relu { tape.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // plain (gain 1) uniform init for the classifier layer
        let bound = (3.0 / in_features as f64).sqrt() as f32;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_fn([out_features, in_features], |_| {
                rng.random_range(-bound..bound)
            }),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]))?;
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// 3×3 convolution followed by sub-pixel rearrangement. `weight` must have
/// `out·factor²` output channels; factor 1 is a plain convolution.
pub fn upsample_block(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    factor: usize,
) -> Result<Var> {
    if !matches!(factor, 1 | 2) {
        return Err(TensorError::InvalidArgument {
            op: "upsample_block",
            reason: format!("unsupported factor {factor}, expected 1 or 2"),
        });
    }
    let y = tape.conv2d(input, weight, bias, 1, 1)?;
    if factor == 1 {
        Ok(y)
    } else {
        tape.pixel_shuffle(y, factor)
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub conv: Conv2d,
    pub factor: usize,
}

impl UpsampleBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, name, in_ch, out_ch * factor * factor, 3, 1, rng)?;
        Ok(UpsampleBlock { conv, factor })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.conv.weight);
        let b = self.conv.bias.map(|b| tape.param(store, b));
        upsample_block(tape, x, w, b, self.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_factor_one_keeps_spatial_dims() {
        let mut rng = seeded_rng(1);
        let mut store = ParamStore::new();
        let block = UpsampleBlock::new(&mut store, "up", 4, 3, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4, 5, 6], 0.5));
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 5, 6]);
    }

    #[test]
    fn upsample_zero_input_without_bias_is_zero() {
        let mut rng = seeded_rng(2);
        let w = kaiming_uniform(&[8, 2, 3, 3], 18, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        let w = tape.constant(w);
        let y = upsample_block(&mut tape, x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 6, 6]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_rejects_other_factors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 9, 2, 2]));
        let w = tape.constant(Tensor::zeros([9, 9, 3, 3]));
        assert!(upsample_block(&mut tape, x, w, None, 3).is_err());
    }

    #[test]
    fn resblock_param_count_matches_layers() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let b = ResBlock::new(&mut store, "b", 3, 8, 2, true, &mut rng).unwrap();
        assert_eq!(b.num_params(), store.num_scalars());
        assert_eq!(b.num_params(), (27 * 8 + 8) + (72 * 8 + 8) + (3 * 8 + 8));
    }
}
