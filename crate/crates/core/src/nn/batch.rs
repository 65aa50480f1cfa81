use super::mlp::MlpParams;
use crate::error::{check_len, Result};

/// Reusable scratch space for evaluating one network on many inputs at once.
///
/// Inputs and outputs are row-major `rows × width` buffers. Each layer is a
/// single GEMM, which is much faster than per-row matrix-vector products
/// when the same network is applied to a whole batch of states.
#[derive(Debug, Default, Clone)]
pub struct BatchForward {
    cur: Vec<f64>,
    next: Vec<f64>,
}

impl BatchForward {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run<'a>(&'a mut self, params: &MlpParams, inputs: &[f64], rows: usize) -> Result<&'a [f64]> {
        check_len("batch input", rows * params.input_width(), inputs.len())?;
        self.cur.clear();
        self.cur.extend_from_slice(inputs);
        for (k, s) in params.specs().iter().enumerate() {
            let (n_in, n_out) = (s.input_width, s.output_width);
            self.next.clear();
            self.next.reserve(rows * n_out);
            let bias = params.bias(k);
            for _ in 0..rows {
                self.next.extend_from_slice(bias);
            }
            if rows > 0 {
                let w = params.weights(k);
                // Z (rows × out) += X (rows × in) · Wᵀ (in × out)
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        n_in,
                        n_out,
                        1.0,
                        self.cur.as_ptr(),
                        n_in as isize,
                        1,
                        w.as_ptr(),
                        1,
                        n_in as isize,
                        1.0,
                        self.next.as_mut_ptr(),
                        n_out as isize,
                        1,
                    );
                }
            }
            s.activation.apply_slice(&mut self.next);
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        Ok(&self.cur)
    }
}
