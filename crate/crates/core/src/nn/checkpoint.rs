use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};

/// Dense row-major tensor as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor shape {:?} holds {n} values, found {}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        self.validate()?;
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("validated")),
            _ => Err(Error::Checkpoint(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        self.validate()?;
        match self.shape[..] {
            [_] => Ok(Array1::from(self.data.clone())),
            _ => Err(Error::Checkpoint(format!("expected a vector, got shape {:?}", self.shape))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

pub fn to_named(p: &impl Params, prefix: &str) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |name, a| {
        out.push(NamedTensor {
            name,
            tensor: Tensor::from_array2(a),
        })
    });
    out
}

/// Loads tensors into `p`, requiring names and shapes to match exactly.
pub fn load_named(p: &mut impl Params, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
    let expected: Vec<(String, (usize, usize))> = p
        .named_params()
        .into_iter()
        .map(|(n, a)| (crate::nn::join(prefix, &n), a.dim()))
        .collect();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors under '{prefix}', found {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut arrays = Vec::with_capacity(tensors.len());
    for ((name, dim), t) in expected.iter().zip(tensors) {
        if &t.name != name {
            return Err(Error::Checkpoint(format!("expected tensor '{name}', found '{}'", t.name)));
        }
        let a = t.tensor.to_array2()?;
        if a.dim() != *dim {
            return Err(Error::Checkpoint(format!("tensor '{name}' has shape {:?}, expected {dim:?}", a.dim())));
        }
        arrays.push(a);
    }
    let mut it = arrays.into_iter();
    p.visit_mut(&mut |dst| *dst = it.next().expect("count checked"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn named_round_trip_is_bit_exact() {
        let mut rng = crate::rng::derive(5, "ckpt");
        let l = Linear::new(3, 4, &mut rng);
        let named = to_named(&l, "fc1");
        assert_eq!(named[0].name, "fc1.w");
        let json = serde_json::to_string(&named).unwrap();
        let back: Vec<NamedTensor> = serde_json::from_str(&json).unwrap();
        let mut l2 = Linear::zeros(3, 4);
        load_named(&mut l2, "fc1", &back).unwrap();
        assert_eq!(l, l2);
        let mut wrong = Linear::zeros(4, 4);
        assert!(load_named(&mut wrong, "fc1", &back).is_err());
        assert!(load_named(&mut l2, "fc2", &back).is_err());
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        let t = Tensor {
            shape: vec![2, 2],
            data: vec![1.0],
        };
        assert!(t.to_array2().is_err());
    }
}
