//! Named parameter traversal shared by the optimizer, checkpoints and the
//! parameter census.

use crate::linalg::Matrix;
use crate::tape::{Tape, Var};

pub trait Parameterized {
    /// Visits every trainable tensor with its fully-qualified name.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix));

    /// Mutable traversal. Implementors drop any cached derived state here.
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, m| n += m.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records `value` on the tape, as a named parameter when `trainable`.
pub fn leaf<'t>(tape: &'t Tape, name: String, value: &Matrix, trainable: bool) -> Var<'t> {
    if trainable {
        tape.param(name, value)
    } else {
        tape.constant(value.clone())
    }
}
