//! Element types the tape can run on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar: Float + Debug + Default + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    /// `C = A · B + beta · C` on dense row-major matrices; `A` is `m × k`
    /// (or `k × m` when `ta`), `B` is `k × n` (or `n × k` when `tb`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from(v).expect("finite literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

/// Row/column strides of a row-major `rows × cols` matrix, transposed or not.
fn strides(cols: usize, rows_of_op: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows_of_op as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(k, m, ta);
                let (rsb, csb) = strides(n, k, tb);
                // SAFETY: the asserted lengths cover every element addressed by
                // these row-major strides.
                unsafe {
                    $kernel(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
