//! Parameter traversal shared by the optimizer and checkpoint code.

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices; subject to decoupled weight decay.
    Weight,
    /// Biases and normalization affine terms; no decay.
    Bias,
    /// Attention scale factors; no decay, projected back to positive values.
    Scale,
}

/// Receives every trainable tensor and every non-trainable buffer of a module.
pub trait Visitor {
    fn param(&mut self, name: &str, shape: &[usize], value: &mut [f32], grad: &mut [f32], kind: ParamKind);
    fn buffer(&mut self, name: &str, value: &mut [f32]);
}

/// Anything holding parameters.
///
/// Visiting hands out mutable access, so implementors drop any state derived
/// from their parameters (such as cached binarized weights) when visited.
pub trait Module {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor);

    fn zero_grad(&mut self) {
        struct Z;
        impl Visitor for Z {
            fn param(&mut self, _: &str, _: &[usize], _: &mut [f32], grad: &mut [f32], _: ParamKind) {
                grad.iter_mut().for_each(|g| *g = 0.0);
            }
            fn buffer(&mut self, _: &str, _: &mut [f32]) {}
        }
        self.visit("", &mut Z);
    }

    /// Total number of trainable scalars.
    fn num_params(&mut self) -> usize {
        struct C(usize);
        impl Visitor for C {
            fn param(&mut self, _: &str, _: &[usize], v: &mut [f32], _: &mut [f32], _: ParamKind) {
                self.0 += v.len();
            }
            fn buffer(&mut self, _: &str, _: &mut [f32]) {}
        }
        let mut c = C(0);
        self.visit("", &mut c);
        c.0
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
