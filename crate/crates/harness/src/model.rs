//! LSTM plus a linear softmax read-out.

use hdetach_core::checkpoint::{Checkpoint, CheckpointError};
use hdetach_core::lstm::{init_params, InitScheme, LstmError};
use hdetach_core::numerics::{Matrix, Rng, Vector};
use hdetach_core::optim::ParamSet;
use hdetach_core::LstmParams;

/// `logits = W_out h + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    /// `classes × hidden`.
    pub w: Matrix,
    pub b: Vector,
}

impl OutputHead {
    pub fn zeros(classes: usize, hidden: usize) -> Self {
        OutputHead {
            w: Matrix::zeros(classes, hidden),
            b: Vector::zeros(classes),
        }
    }

    /// `U(-1/√n, 1/√n)` weights, zero bias.
    pub fn init(classes: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut head = Self::zeros(classes, hidden);
        let bound = 1.0 / (hidden as f64).sqrt();
        for w in head.w.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
        head
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, h: &Vector) -> Vector {
        self.w.matvec(h).expect("head shape").add(&self.b).expect("head shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub lstm: LstmParams,
    pub head: OutputHead,
}

impl Model {
    pub fn init(hidden: usize, input: usize, classes: usize, rng: &mut Rng) -> Result<Self, LstmError> {
        let lstm = init_params(hidden, input, rng, InitScheme::UniformXavier)?;
        let head = OutputHead::init(classes, hidden, rng);
        Ok(Model { lstm, head })
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            lstm: self.lstm.zeros_like(),
            head: OutputHead::zeros(self.head.classes(), self.lstm.hidden()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    pub fn input(&self) -> usize {
        self.lstm.input()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("hidden", self.hidden())
            .with_meta("input", self.input())
            .with_meta("classes", self.classes());
        ck.add_lstm(&self.lstm);
        ck.push_matrix("w_out", &self.head.w);
        ck.push_vector("b_out", &self.head.b);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let lstm = ck.lstm_params()?;
        let w = ck.matrix("w_out")?;
        let b = ck.vector("b_out")?;
        if w.cols() != lstm.hidden() || b.len() != w.rows() {
            return Err(CheckpointError::Shape {
                name: "w_out".into(),
                expected: (b.len(), lstm.hidden()),
                found: w.shape(),
            });
        }
        Ok(Model {
            lstm,
            head: OutputHead { w, b },
        })
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.lstm.tensors();
        t.push(self.head.w.as_slice());
        t.push(self.head.b.as_slice());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.lstm.tensors_mut();
        t.push(self.head.w.as_mut_slice());
        t.push(self.head.b.as_mut_slice());
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(4, 3, 5, &mut Rng::new(1)).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.tensors().len(), 14);
    }

    #[test]
    fn head_shape_checked() {
        let m = Model::init(4, 3, 5, &mut Rng::new(1)).unwrap();
        let mut ck = m.to_checkpoint();
        ck.tensors.retain(|t| t.name != "b_out");
        ck.push("b_out", 7, 1, &[0.0; 7]);
        assert!(matches!(Model::from_checkpoint(&ck), Err(CheckpointError::Shape { .. })));
    }
}
