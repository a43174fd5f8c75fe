//! Parameter bookkeeping shared by every model component.
//!
//! Each component owns a plain struct of [`DiffTensor`] fields. Binding a
//! struct onto a [`Tape`] yields a parallel struct of [`TensorId`]s; frozen
//! bindings register as constants so no gradient ever reaches them. The
//! `for_each` visitors expose `(name, tensor)` pairs in a stable order for
//! the optimizer and the checkpoint codec.

use crate::tensor::DiffTensor;

pub trait ParamSet {
    fn for_each(&self, f: &mut dyn FnMut(&str, &DiffTensor));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffTensor));

    fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, _| n += 1);
        n
    }

    fn numel_total(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    /// Bit-exact copy of all values, for freeze-protocol assertions.
    fn snapshot(&self) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        self.for_each(&mut |_, t| {
            out.push(t.data().iter().map(|v| v.to_bits()).collect());
        });
        out
    }

    fn same_bits(&self, snapshot: &[Vec<u64>]) -> bool {
        let mut idx = 0;
        let mut same = true;
        self.for_each(&mut |_, t| {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            if snapshot.get(idx) != Some(&bits) {
                same = false;
            }
            idx += 1;
        });
        same && idx == snapshot.len()
    }

    fn zero_grads(&mut self) {
        self.for_each_mut(&mut |_, t| t.zero_grad());
    }

    /// Scale accumulated gradients, e.g. to average over an accumulation
    /// window.
    fn scale_grads(&mut self, factor: f64) {
        self.for_each_mut(&mut |_, t| t.scale_grad(factor));
    }
}

/// Defines a parameter struct plus its tape binding:
/// `param_fields!(Params, Bound { a, b, c });` generates `Params { a, b, c }`
/// with visitors, `Params::bind`, and `Bound::apply_grads`.
macro_rules! param_fields {
    ($(#[$meta:meta])* $Params:ident, $Bound:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $Params {
            $(pub $field: crate::tensor::DiffTensor,)+
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $Bound {
            $(pub $field: crate::tape::TensorId,)+
        }

        impl $Params {
            pub fn bind(&self, tape: &mut crate::tape::Tape, frozen: bool) -> $Bound {
                $Bound {
                    $($field: tape.param(&self.$field, frozen),)+
                }
            }
        }

        impl crate::params::ParamSet for $Params {
            fn for_each(&self, f: &mut dyn FnMut(&str, &crate::tensor::DiffTensor)) {
                $(f(stringify!($field), &self.$field);)+
            }
            fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut crate::tensor::DiffTensor)) {
                $(f(stringify!($field), &mut self.$field);)+
            }
        }

        impl $Bound {
            /// Accumulate this binding's gradients back into the parameter
            /// struct (zeros for tensors the loss never touched).
            pub fn apply_grads(
                &self,
                params: &mut $Params,
                grads: &crate::tape::Gradients,
            ) {
                $(params
                    .$field
                    .accumulate_grad(&grads.wrt(self.$field, params.$field.numel()));)+
            }
        }
    };
}

pub(crate) use param_fields;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    param_fields!(Toy, ToyBound { alpha, beta });

    #[test]
    fn visitors_and_binding_agree() {
        let toy = Toy {
            alpha: DiffTensor::row(&[1.0, 2.0]),
            beta: DiffTensor::scalar(3.0),
        };
        let mut names = Vec::new();
        toy.for_each(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names, ["alpha", "beta"]);
        assert_eq!(toy.num_tensors(), 2);
        assert_eq!(toy.numel_total(), 3);

        let mut tape = Tape::new();
        let bound = toy.bind(&mut tape, false);
        let loss = tape.sq_sum(bound.alpha).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut toy2 = toy.clone();
        bound.apply_grads(&mut toy2, &grads);
        assert_eq!(toy2.alpha.grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(toy2.beta.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn snapshot_detects_any_bit_change() {
        let mut toy = Toy {
            alpha: DiffTensor::row(&[1.0, 2.0]),
            beta: DiffTensor::scalar(3.0),
        };
        let snap = toy.snapshot();
        assert!(toy.same_bits(&snap));
        let flipped = f64::from_bits(toy.beta.data()[0].to_bits() ^ 1);
        toy.beta.data_mut()[0] = flipped;
        assert!(!toy.same_bits(&snap));
    }

    #[test]
    fn frozen_binding_receives_no_gradient() {
        let toy = Toy {
            alpha: DiffTensor::row(&[1.0, 2.0]),
            beta: DiffTensor::scalar(3.0),
        };
        let mut tape = Tape::new();
        let bound = toy.bind(&mut tape, true);
        let loss = tape.sq_sum(bound.alpha).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(bound.alpha).is_none());
    }
}
