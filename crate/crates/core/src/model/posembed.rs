//! Fixed 2-D sine-cosine position tables.

use crate::numerics::Tensor;

fn sincos_1d(out: &mut [f64], pos: f64) {
    let quarter = out.len() / 2;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        out[i] = (pos * omega).sin();
        out[quarter + i] = (pos * omega).cos();
    }
}

/// `[grid*grid (+1), dim]` table for a square patch grid. The first half of
/// each row encodes the patch row, the second half the patch column. With
/// `cls`, row 0 is all zeros and patch rows are shifted down by one.
/// `dim` must be a multiple of 4.
pub fn sincos_2d(grid: usize, dim: usize, cls: bool) -> Tensor {
    assert!(dim % 4 == 0, "position embedding width must be a multiple of 4");
    let offset = usize::from(cls);
    let mut t = Tensor::zeros([grid * grid + offset, dim]);
    let half = dim / 2;
    for r in 0..grid {
        for c in 0..grid {
            let row = (offset + r * grid + c) * dim;
            let data = t.data_mut();
            sincos_1d(&mut data[row..row + half], r as f64);
            sincos_1d(&mut data[row + half..row + dim], c as f64);
        }
    }
    t
}
