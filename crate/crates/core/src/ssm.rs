//! Diagonal state-space kernel: zero-order-hold discretization, the
//! recurrent scan, its adjoint, the LTI convolution form and the
//! input-dependent (selective) projections.
//!
//! Shapes: a sequence has `L` steps and `d` channels; every channel carries
//! an `N`-dimensional diagonal state. `B_t` and `C_t` (`L×N`) are shared by
//! all channels while `Δ` (`L×d`) is per channel, so `Ā` and `B̄` are
//! `L×d×N` tensors stored flat as `(t·d + c)·N + n`.

use crate::error::{GmnError, Result};
use crate::tensor::Matrix;

/// Below this `|Δ·a|` the ZOH input scale switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal state matrix entries, `d×N`, all negative.
    pub a: Matrix,
    /// Pre-softplus step-size bias, one per channel.
    pub log_delta_bias: Vec<f64>,
    pub d_state: usize,
    pub d_model: usize,
}

impl SsmParams {
    /// `a[c][n] = −(n + 1)` for every channel.
    pub fn new(d_model: usize, d_state: usize, log_delta_bias: Vec<f64>) -> SsmParams {
        let mut a = Matrix::zeros(d_model, d_state);
        for c in 0..d_model {
            for n in 0..d_state {
                a.set(c, n, -((n + 1) as f64));
            }
        }
        SsmParams {
            a,
            log_delta_bias,
            d_state,
            d_model,
        }
    }

    pub fn is_stable(&self) -> bool {
        self.a.data.iter().all(|&x| x < 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveInputs {
    pub b: Matrix,
    pub c: Matrix,
    pub delta: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmDiscretization {
    pub len: usize,
    pub channels: usize,
    pub d_state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl SsmDiscretization {
    #[inline]
    fn idx(&self, t: usize, c: usize, n: usize) -> usize {
        (t * self.channels + c) * self.d_state + n
    }

    pub fn a_bar_at(&self, t: usize, c: usize, n: usize) -> f64 {
        self.a_bar[self.idx(t, c, n)]
    }

    pub fn b_bar_at(&self, t: usize, c: usize, n: usize) -> f64 {
        self.b_bar[self.idx(t, c, n)]
    }

    /// Time-invariant discretization from per-channel `(Ā, B̄)` slices.
    pub fn constant(len: usize, a_bar: &Matrix, b_bar: &Matrix) -> SsmDiscretization {
        assert_eq!(a_bar.shape(), b_bar.shape());
        let (channels, d_state) = a_bar.shape();
        let mut ab = Vec::with_capacity(len * a_bar.len());
        let mut bb = Vec::with_capacity(len * b_bar.len());
        for _ in 0..len {
            ab.extend_from_slice(&a_bar.data);
            bb.extend_from_slice(&b_bar.data);
        }
        SsmDiscretization {
            len,
            channels,
            d_state,
            a_bar: ab,
            b_bar: bb,
        }
    }

    fn is_time_invariant(&self) -> bool {
        let slice = self.channels * self.d_state;
        (1..self.len).all(|t| {
            self.a_bar[t * slice..(t + 1) * slice] == self.a_bar[..slice]
                && self.b_bar[t * slice..(t + 1) * slice] == self.b_bar[..slice]
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Scalar ZOH: returns `(Ā, s)` with `Ā = exp(Δa)` and `B̄ = s·B`,
/// `s = (exp(Δa) − 1)/a`.
#[inline]
pub fn zoh(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let scale = if x.abs() < SERIES_THRESHOLD {
        delta * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        x.exp_m1() / a
    };
    (a_bar, scale)
}

/// Partial derivatives of [`zoh`]:
/// `(∂Ā/∂Δ, ∂Ā/∂a, ∂s/∂Δ, ∂s/∂a)`, consistent with the branch `zoh` takes.
#[inline]
pub fn zoh_partials(delta: f64, a: f64) -> (f64, f64, f64, f64) {
    let x = delta * a;
    let e = x.exp();
    let (ds_ddelta, ds_da) = if x.abs() < SERIES_THRESHOLD {
        (1.0 + x + x * x / 2.0, delta * delta * (0.5 + x / 3.0))
    } else {
        (e, (x * e - x.exp_m1()) / (a * a))
    };
    (a * e, delta * e, ds_ddelta, ds_da)
}

/// Elementwise diagonal ZOH for a whole sequence.
pub fn discretize(params: &SsmParams, delta: &Matrix, b: &Matrix) -> Result<SsmDiscretization> {
    discretize_raw(&params.a, delta, b)
}

pub(crate) fn discretize_raw(a: &Matrix, delta: &Matrix, b: &Matrix) -> Result<SsmDiscretization> {
    let (channels, d_state) = a.shape();
    let len = delta.rows;
    if delta.cols != channels || b.rows != len || b.cols != d_state {
        return Err(GmnError::shape(
            "discretize",
            format!(
                "A {channels}x{d_state}, Δ {}x{}, B {}x{}",
                delta.rows, delta.cols, b.rows, b.cols
            ),
        ));
    }
    let size = len * channels * d_state;
    let mut a_bar = Vec::with_capacity(size);
    let mut b_bar = Vec::with_capacity(size);
    for t in 0..len {
        let brow = b.row(t);
        for c in 0..channels {
            let dt = delta.get(t, c);
            let arow = a.row(c);
            for n in 0..d_state {
                let (ab, s) = zoh(dt, arow[n]);
                a_bar.push(ab);
                b_bar.push(s * brow[n]);
            }
        }
    }
    Ok(SsmDiscretization {
        len,
        channels,
        d_state,
        a_bar,
        b_bar,
    })
}

fn check_scan_shapes(disc: &SsmDiscretization, c: &Matrix, x: &Matrix) -> Result<()> {
    if x.rows != disc.len || x.cols != disc.channels || c.rows != disc.len || c.cols != disc.d_state
    {
        return Err(GmnError::shape(
            "scan",
            format!(
                "disc {}x{}x{}, C {}x{}, x {}x{}",
                disc.len, disc.channels, disc.d_state, c.rows, c.cols, x.rows, x.cols
            ),
        ));
    }
    Ok(())
}

/// `h_t = Ā_t ⊙ h_{t−1} + B̄_t·x_t`, `y_t = ⟨C_t, h_t⟩` per channel, `h_0 = 0`.
pub fn scan_recurrent(disc: &SsmDiscretization, c: &Matrix, x: &Matrix) -> Result<Matrix> {
    check_scan_shapes(disc, c, x)?;
    let (d, n_state) = (disc.channels, disc.d_state);
    let mut h = vec![0.0; d * n_state];
    let mut y = Matrix::zeros(disc.len, d);
    for t in 0..disc.len {
        let crow = c.row(t);
        let base = t * d * n_state;
        for ch in 0..d {
            let xv = x.get(t, ch);
            let hs = &mut h[ch * n_state..(ch + 1) * n_state];
            let ab = &disc.a_bar[base + ch * n_state..base + (ch + 1) * n_state];
            let bb = &disc.b_bar[base + ch * n_state..base + (ch + 1) * n_state];
            let mut acc = 0.0;
            for n in 0..n_state {
                hs[n] = ab[n] * hs[n] + bb[n] * xv;
                acc += crow[n] * hs[n];
            }
            y.set(t, ch, acc);
        }
    }
    Ok(y)
}

/// All hidden states `h_1..h_L`, flat `L×d×N`.
pub fn scan_states(disc: &SsmDiscretization, x: &Matrix) -> Vec<f64> {
    let (d, n_state) = (disc.channels, disc.d_state);
    let slice = d * n_state;
    let mut states = vec![0.0; disc.len * slice];
    for t in 0..disc.len {
        for ch in 0..d {
            let xv = x.get(t, ch);
            for n in 0..n_state {
                let i = t * slice + ch * n_state + n;
                let prev = if t == 0 { 0.0 } else { states[i - slice] };
                states[i] = disc.a_bar[i] * prev + disc.b_bar[i] * xv;
            }
        }
    }
    states
}

/// Gradients of a scalar loss w.r.t. the scan inputs.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub x: Matrix,
    pub c: Matrix,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Adjoint of [`scan_recurrent`]: a right-to-left recurrence on
/// `λ_t = C_t·gy_t + Ā_{t+1} ⊙ λ_{t+1}`.
pub fn scan_recurrent_backward(
    disc: &SsmDiscretization,
    c: &Matrix,
    x: &Matrix,
    gy: &Matrix,
) -> Result<ScanGrads> {
    check_scan_shapes(disc, c, x)?;
    if gy.shape() != x.shape() {
        return Err(GmnError::shape("scan backward", "output gradient shape"));
    }
    let (d, n_state) = (disc.channels, disc.d_state);
    let slice = d * n_state;
    let states = scan_states(disc, x);
    let mut carry = vec![0.0; slice];
    let mut gx = Matrix::zeros(disc.len, d);
    let mut gc = Matrix::zeros(disc.len, n_state);
    let mut g_abar = vec![0.0; disc.len * slice];
    let mut g_bbar = vec![0.0; disc.len * slice];
    for t in (0..disc.len).rev() {
        let crow = c.row(t);
        for ch in 0..d {
            let gyv = gy.get(t, ch);
            let xv = x.get(t, ch);
            let mut gxv = 0.0;
            for n in 0..n_state {
                let j = ch * n_state + n;
                let i = t * slice + j;
                let lam = gyv * crow[n] + carry[j];
                gc.data[t * n_state + n] += gyv * states[i];
                if t > 0 {
                    g_abar[i] = lam * states[i - slice];
                }
                g_bbar[i] = lam * xv;
                gxv += lam * disc.b_bar[i];
                carry[j] = disc.a_bar[i] * lam;
            }
            gx.set(t, ch, gxv);
        }
    }
    Ok(ScanGrads {
        x: gx,
        c: gc,
        a_bar: g_abar,
        b_bar: g_bbar,
    })
}

/// Chains `∂/∂Ā` and `∂/∂B̄` back to `(A, Δ, B)`.
pub fn discretize_backward(
    a: &Matrix,
    delta: &Matrix,
    b: &Matrix,
    g_abar: &[f64],
    g_bbar: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let (d, n_state) = a.shape();
    let len = delta.rows;
    let mut ga = Matrix::zeros(d, n_state);
    let mut gdelta = Matrix::zeros(len, d);
    let mut gb = Matrix::zeros(len, n_state);
    for t in 0..len {
        for ch in 0..d {
            let dt = delta.get(t, ch);
            let mut gdt = 0.0;
            for n in 0..n_state {
                let i = (t * d + ch) * n_state + n;
                let av = a.get(ch, n);
                let bv = b.get(t, n);
                let (dab_ddt, dab_da, ds_ddt, ds_da) = zoh_partials(dt, av);
                let (_, s) = zoh(dt, av);
                let gab = g_abar[i];
                let gbb = g_bbar[i];
                gdt += gab * dab_ddt + gbb * bv * ds_ddt;
                ga.data[ch * n_state + n] += gab * dab_da + gbb * bv * ds_da;
                gb.data[t * n_state + n] += gbb * s;
            }
            gdelta.set(t, ch, gdt);
        }
    }
    (ga, gdelta, gb)
}

/// Convolution kernel `K̄_k = Σ_n C_n Ā_n^k B̄_n` per channel, `len×d`.
pub fn lti_kernel(a_bar: &Matrix, b_bar: &Matrix, c: &[f64], len: usize) -> Matrix {
    let (d, n_state) = a_bar.shape();
    let mut k = Matrix::zeros(len, d);
    for ch in 0..d {
        let mut power: Vec<f64> = b_bar.row(ch).to_vec();
        for step in 0..len {
            let v: f64 = (0..n_state).map(|n| c[n] * power[n]).sum();
            k.set(step, ch, v);
            for n in 0..n_state {
                power[n] *= a_bar.get(ch, n);
            }
        }
    }
    k
}

/// Convolutional form of an LTI scan: `y_t = Σ_{τ≤t} K̄_{t−τ} x_τ`.
///
/// Fails if the discretization or `C` varies over time.
pub fn kernel_conv(disc: &SsmDiscretization, c: &Matrix, x: &Matrix) -> Result<Matrix> {
    check_scan_shapes(disc, c, x)?;
    let time_invariant_c = (1..c.rows).all(|t| c.row(t) == c.row(0));
    if !disc.is_time_invariant() || !time_invariant_c {
        return Err(GmnError::Contract(
            "kernel_conv needs a time-invariant (non-selective) system".into(),
        ));
    }
    let (d, n_state) = (disc.channels, disc.d_state);
    if disc.len == 0 {
        return Ok(Matrix::zeros(0, d));
    }
    let a_bar = Matrix::from_vec(d, n_state, disc.a_bar[..d * n_state].to_vec())?;
    let b_bar = Matrix::from_vec(d, n_state, disc.b_bar[..d * n_state].to_vec())?;
    let kernel = lti_kernel(&a_bar, &b_bar, c.row(0), disc.len);
    let mut y = Matrix::zeros(disc.len, d);
    for t in 0..disc.len {
        for tau in 0..=t {
            for ch in 0..d {
                y.data[t * d + ch] += kernel.get(t - tau, ch) * x.get(tau, ch);
            }
        }
    }
    Ok(y)
}

/// `B_t = x_t W_B`, `C_t = x_t W_C`, `Δ_t = softplus(x_t W_Δ + bias)`.
pub fn selective_projection(
    x: &Matrix,
    w_b: &Matrix,
    w_c: &Matrix,
    w_delta: &Matrix,
    params: &SsmParams,
) -> Result<SelectiveInputs> {
    if w_b.cols != params.d_state
        || w_c.cols != params.d_state
        || w_delta.cols != params.d_model
        || params.log_delta_bias.len() != params.d_model
    {
        return Err(GmnError::shape(
            "selective_projection",
            "weights disagree with d_state / d_model",
        ));
    }
    let b = x.matmul(w_b)?;
    let c = x.matmul(w_c)?;
    let mut delta = x.matmul(w_delta)?;
    for t in 0..delta.rows {
        for (v, bias) in delta.row_mut(t).iter_mut().zip(&params.log_delta_bias) {
            *v = softplus(*v + bias);
        }
    }
    Ok(SelectiveInputs { b, c, delta })
}
