//! Plain-slice kernels shared by the forward and backward passes.

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output element is summed over `k` in order from zero and then
/// added to `out`, whatever tile it falls in, so a row's result does not
/// depend on how many other rows are in the product.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let rows = TILE_ROWS.min(m - i);
        let mut j = 0;
        while j < n {
            if n - j >= TILE_COLS {
                tile::<TILE_COLS>(a, b, out, i, rows, j, k, n);
                j += TILE_COLS;
            } else if n - j >= 4 {
                tile::<4>(a, b, out, i, rows, j, k, n);
                j += 4;
            } else {
                tile::<1>(a, b, out, i, rows, j, k, n);
                j += 1;
            }
        }
        i += rows;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<const W: usize>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    i: usize,
    rows: usize,
    j: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; W]; TILE_ROWS];
    for p in 0..k {
        let bt: &[f64; W] = b[p * n + j..p * n + j + W].try_into().unwrap();
        for r in 0..TILE_ROWS {
            // Rows past `m` accumulate zeros and are discarded.
            let av = if r < rows { a[(i + r) * k + p] } else { 0.0 };
            for c in 0..W {
                acc[r][c] += av * bt[c];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate().take(rows) {
        let o = &mut out[(i + r) * n + j..(i + r) * n + j + W];
        for c in 0..W {
            o[c] += acc_row[c];
        }
    }
}

fn with_transposed<R>(src: &[f64], rows: usize, cols: usize, f: impl FnOnce(&[f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut t = cell.borrow_mut();
        if t.len() < rows * cols {
            t.resize(rows * cols, 0.0);
        }
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = src[r * cols + c];
            }
        }
        f(&t[..rows * cols])
    })
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    with_transposed(b, n, k, |bt| matmul_acc(a, bt, out, m, k, n));
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn t_matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    with_transposed(a, m, k, |at| matmul_acc(at, b, out, k, m, n));
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_K * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))` from one tanh evaluation.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (x + GELU_K * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    (y, dy)
}

/// Row-wise softmax in place with max subtraction. With `causal`, entry
/// `(i, j)` for `j > i` is forced to probability zero.
pub fn softmax_rows(values: &mut [f64], cols: usize, causal: bool) {
    for (i, row) in values.chunks_mut(cols).enumerate() {
        let live = if causal { (i + 1).min(cols) } else { cols };
        let max = row[..live]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..live].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..live].iter_mut() {
            *v /= sum;
        }
        for v in row[live..].iter_mut() {
            *v = 0.0;
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
