use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{apply_mask, dropout_mask, loss_grad, validate_dropout, FusionError, Backward, FusionInput};
use crate::encoders::NUM_BRANCHES;
use crate::tensor::{affine, affine_backward, Init, ParamSlot, Scalar, Tensor};

/// Three affine layers over the unpadded concatenation of the branch rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub branch_dims: [usize; NUM_BRANCHES],
    pub hidden: [usize; 2],
    pub classes: usize,
    pub dropout: f64,
}

impl MlpSpec {
    /// Hidden widths 1024 and 256, dropout 0.5.
    pub fn new(branch_dims: [usize; NUM_BRANCHES], classes: usize) -> Self {
        Self {
            branch_dims,
            hidden: [1024, 256],
            classes,
            dropout: 0.5,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.branch_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.input_dim() == 0 || self.hidden.contains(&0) || self.classes < 2 {
            return Err(FusionError::InvalidSpec(
                "mlp needs a non-empty input, non-zero hidden widths and at least two classes".into(),
            ));
        }
        validate_dropout(self.dropout)
    }

    pub fn layout(&self) -> Vec<ParamSlot> {
        let dims = [self.input_dim(), self.hidden[0], self.hidden[1], self.classes];
        let mut out = Vec::new();
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            out.push(ParamSlot::new(format!("mlp.{l}.weight"), &[o, i], Init::FanIn(i)));
            out.push(ParamSlot::new(format!("mlp.{l}.bias"), &[o], Init::Zeros));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MlpHead<T> {
    spec: MlpSpec,
    params: Vec<Tensor<T>>,
}

struct Cache<T> {
    x: Vec<T>,
    z: [Vec<T>; 2],
    a: [Vec<T>; 2],
    masks: [Option<Vec<T>>; 2],
    logits: Vec<T>,
}

impl<T: Scalar> MlpHead<T> {
    pub(super) fn from_parts(spec: MlpSpec, params: Vec<Tensor<T>>) -> Self {
        Self { spec, params }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Active rows contribute their first `dims[i]` entries; inactive rows
    /// contribute zeros without reading the row.
    fn concat(&self, input: &FusionInput<T>) -> Result<Vec<T>, FusionError> {
        input.check()?;
        if input.dims != self.spec.branch_dims {
            return Err(FusionError::DimensionMismatch(format!(
                "input branch dims {:?} differ from head dims {:?}",
                input.dims, self.spec.branch_dims
            )));
        }
        let mut x = Vec::with_capacity(self.spec.input_dim());
        for (i, row) in input.rows.iter().enumerate() {
            let d = input.dims[i];
            if input.is_active(i) {
                x.extend_from_slice(&row[..d]);
            } else {
                x.extend(std::iter::repeat(T::zero()).take(d));
            }
        }
        Ok(x)
    }

    fn run(&self, input: &FusionInput<T>, mut rng: Option<&mut dyn RngCore>) -> Result<Cache<T>, FusionError> {
        let x = self.concat(input)?;
        let p = &self.params;
        let z0 = affine(&p[0].data, &p[1].data, &x);
        let mut a0: Vec<T> = z0.iter().map(|&v| v.max(T::zero())).collect();
        let m0 = dropout_mask(a0.len(), self.spec.dropout, rng.as_deref_mut());
        apply_mask(&mut a0, m0.as_deref());
        let z1 = affine(&p[2].data, &p[3].data, &a0);
        let mut a1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
        let m1 = dropout_mask(a1.len(), self.spec.dropout, rng);
        apply_mask(&mut a1, m1.as_deref());
        let logits = affine(&p[4].data, &p[5].data, &a1);
        Ok(Cache {
            x,
            z: [z0, z1],
            a: [a0, a1],
            masks: [m0, m1],
            logits,
        })
    }

    pub fn forward(&self, input: &FusionInput<T>, rng: Option<&mut dyn RngCore>) -> Result<Vec<T>, FusionError> {
        Ok(self.run(input, rng)?.logits)
    }

    pub fn backward_into(
        &self,
        input: &FusionInput<T>,
        label: usize,
        rng: Option<&mut dyn RngCore>,
        g: &mut [Tensor<T>],
    ) -> Result<Backward<T>, FusionError> {
        let c = self.run(input, rng)?;
        let p = &self.params;
        let (loss, dlogits) = loss_grad(&c.logits, label);

        let (gw, rest) = g.split_at_mut(5);
        let mut da1 = affine_backward(&p[4].data, &c.a[1], &dlogits, &mut gw[4].data, &mut rest[0].data);
        relu_dropout_backward(&mut da1, &c.z[1], c.masks[1].as_deref());
        let (gw, rest) = g.split_at_mut(3);
        let mut da0 = affine_backward(&p[2].data, &c.a[0], &da1, &mut gw[2].data, &mut rest[0].data);
        relu_dropout_backward(&mut da0, &c.z[0], c.masks[0].as_deref());
        let (gw, rest) = g.split_at_mut(1);
        let dx = affine_backward(&p[0].data, &c.x, &da0, &mut gw[0].data, &mut rest[0].data);

        let mut rows = vec![vec![T::zero(); input.width]; NUM_BRANCHES];
        let mut offset = 0;
        for (i, row) in rows.iter_mut().enumerate() {
            let d = input.dims[i];
            if input.is_active(i) {
                row[..d].copy_from_slice(&dx[offset..offset + d]);
            }
            offset += d;
        }
        Ok(Backward {
            loss,
            logits: c.logits,
            rows,
        })
    }
}

fn relu_dropout_backward<T: Scalar>(grad: &mut [T], pre: &[T], mask: Option<&[T]>) {
    for (i, g) in grad.iter_mut().enumerate() {
        if let Some(m) = mask {
            *g *= m[i];
        }
        if pre[i] <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{Head, HeadSpec};

    fn toy_spec() -> MlpSpec {
        let mut dims = [0; NUM_BRANCHES];
        dims[0] = 2;
        MlpSpec {
            branch_dims: dims,
            hidden: [2, 2],
            classes: 2,
            dropout: 0.5,
        }
    }

    fn toy_input(x: [f64; 2]) -> FusionInput<f64> {
        let mut rows = vec![Vec::new(); NUM_BRANCHES];
        rows[0] = x.to_vec();
        FusionInput::from_rows(rows, [true; NUM_BRANCHES], [true; NUM_BRANCHES], 2).unwrap()
    }

    fn set(head: &mut Head<f64>, values: [&[f64]; 6]) {
        for (t, v) in head.params_mut().iter_mut().zip(values) {
            t.data.copy_from_slice(v);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let spec = HeadSpec::Mlp(toy_spec());
        let mut head: Head<f64> = Head::new(&spec, &mut rand::thread_rng()).unwrap();
        set(&mut head, [&[0.0; 4], &[0.0; 2], &[0.0; 4], &[0.0; 2], &[0.0; 4], &[0.25, -1.5]]);
        assert_eq!(head.forward(&toy_input([3.0, -7.0]), None).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn hand_evaluated_two_two_two_two() {
        // x = (1, 2)
        // layer 0: W = [[1, -1], [0.5, 0.5]], b = (0, 1)  -> z = (-1, 2.5) -> a = (0, 2.5)
        // layer 1: W = [[2, 1], [-1, 1]],     b = (0.5, 0) -> z = (3, 2.5)  -> a = (3, 2.5)
        // layer 2: W = [[1, 0], [1, -2]],     b = (0, 1)   -> logits = (3, -1)
        let spec = HeadSpec::Mlp(toy_spec());
        let mut head: Head<f64> = Head::new(&spec, &mut rand::thread_rng()).unwrap();
        set(
            &mut head,
            [
                &[1.0, -1.0, 0.5, 0.5],
                &[0.0, 1.0],
                &[2.0, 1.0, -1.0, 1.0],
                &[0.5, 0.0],
                &[1.0, 0.0, 1.0, -2.0],
                &[0.0, 1.0],
            ],
        );
        let input = toy_input([1.0, 2.0]);
        assert_eq!(head.forward(&input, None).unwrap(), vec![3.0, -1.0]);
        assert_eq!(head.forward(&input, None).unwrap(), head.forward(&input, None).unwrap());
    }

    #[test]
    fn dims_must_match() {
        let spec = HeadSpec::Mlp(toy_spec());
        let head: Head<f64> = Head::new(&spec, &mut rand::thread_rng()).unwrap();
        let rows = vec![vec![1.0; 3]; NUM_BRANCHES];
        let input = FusionInput::from_rows(rows, [true; 8], [true; 8], 3).unwrap();
        assert!(matches!(head.forward(&input, None), Err(FusionError::DimensionMismatch(_))));
    }

    #[test]
    fn parameter_count_matches_dims() {
        let spec = MlpSpec::new([16; NUM_BRANCHES], 3);
        let n: usize = spec.layout().iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(n, 128 * 1024 + 1024 + 1024 * 256 + 256 + 256 * 3 + 3);
    }
}
