//! Selective state-space sequence block.
//!
//! The block keeps a per-channel diagonal state-space system whose input
//! map, readout and step size are functions of the current input (the
//! selection mechanism). Discretization is zero-order hold for the
//! transition (`ā = exp(Δ·A)`) and the Euler simplification for the input
//! (`b̄ = Δ·B`), which keeps `ā ∈ (0,1)` whenever `Δ > 0` and `A < 0`.
//!
//! The length-L recurrence can be evaluated sequentially or with a
//! work-efficient associative scan; both are exposed here and must agree to
//! dtype tolerance.

use crate::numerics::{
    kernels, Array, Graph, NodeId, NumError, ScanMode, Scalar, SeededRng,
};

/// Learnable parameters of one selective-SSM block.
///
/// `A = -exp(a_log)` is elementwise strictly negative by construction. All
/// projections and the depthwise convolution are bias-free; only the step
/// size carries a per-channel bias, so a zero input propagates to a zero
/// output through the whole block.
#[derive(Clone)]
pub struct SsmBlockParams<T: Scalar> {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// `[d_model, 2·d_inner]`; left half feeds the stream, right half the gate.
    pub in_proj: Array<T>,
    /// `[d_inner, d_state]`, `A = -exp(a_log)`.
    pub a_log: Array<T>,
    /// `[d_inner, 1]` rank-1 step-size projection.
    pub delta_proj: Array<T>,
    /// `[d_inner]` per-channel step-size bias.
    pub delta_bias: Array<T>,
    /// `[d_inner, d_state]`.
    pub b_proj: Array<T>,
    /// `[d_inner, d_state]`.
    pub c_proj: Array<T>,
    /// `[d_inner, conv_width]`, depthwise, no bias.
    pub conv_kernel: Array<T>,
    /// `[d_inner]` direct passthrough coefficient.
    pub d_skip: Array<T>,
    /// `[d_inner, d_model]`.
    pub out_proj: Array<T>,
}

impl<T: Scalar> SsmBlockParams<T> {
    /// Initializes a block: projections from the Xavier-normal scheme,
    /// `A[d,n] = -(n+1)` (stored as `a_log = ln(n+1)`), and step-size biases
    /// such that `softplus(bias)` is log-uniform in `[0.001, 0.1]`.
    pub fn init(
        d_model: usize,
        d_state: usize,
        conv_width: usize,
        expand: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, NumError> {
        if d_model == 0 || d_state == 0 || conv_width == 0 || expand == 0 {
            return Err(NumError::InvalidParam(
                "ssm block dimensions must be positive".into(),
            ));
        }
        let d_inner = expand * d_model;
        let in_proj = crate::numerics::xavier_normal_init(d_model, 2 * d_inner, rng)?;

        let mut a_log = Vec::with_capacity(d_inner * d_state);
        for _ in 0..d_inner {
            for n in 0..d_state {
                a_log.push(T::of_f64(((n + 1) as f64).ln()));
            }
        }
        let a_log = Array::from_vec(&[d_inner, d_state], a_log)?;

        let delta_proj = crate::numerics::xavier_normal_init(d_inner, 1, rng)?;
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let mut delta_bias = Vec::with_capacity(d_inner);
        for _ in 0..d_inner {
            let dt = (lo + rng.uniform() * (hi - lo)).exp();
            // inverse softplus: softplus(b) = dt  =>  b = ln(e^dt - 1)
            delta_bias.push(T::of_f64(dt.exp_m1().ln()));
        }
        let delta_bias = Array::from_vec(&[d_inner], delta_bias)?;

        let b_proj = crate::numerics::xavier_normal_init(d_inner, d_state, rng)?;
        let c_proj = crate::numerics::xavier_normal_init(d_inner, d_state, rng)?;
        let conv_sigma = (2.0 / (conv_width as f64 + 1.0)).sqrt();
        let conv_kernel = rng.normal_array(&[d_inner, conv_width], conv_sigma)?;
        let d_skip = Array::full(&[d_inner], T::one())?;
        let out_proj = crate::numerics::xavier_normal_init(d_inner, d_model, rng)?;

        Ok(SsmBlockParams {
            d_model,
            d_inner,
            d_state,
            conv_width,
            in_proj,
            a_log,
            delta_proj,
            delta_bias,
            b_proj,
            c_proj,
            conv_kernel,
            d_skip,
            out_proj,
        })
    }

    /// Continuous transition `A = -exp(a_log)`, strictly negative.
    pub fn a(&self) -> Array<T> {
        self.a_log.map(|v| -v.exp()).expect("shape preserved")
    }
}

/// Per-timestep discretized coefficients fed to either scan algorithm.
/// All three arrays share the shape `[L, d_inner, d_state]`.
#[derive(Clone)]
pub struct ScanInputs<T: Scalar> {
    pub a_bar: Array<T>,
    pub bx: Array<T>,
    pub c: Array<T>,
}

impl<T: Scalar> ScanInputs<T> {
    pub fn new(a_bar: Array<T>, bx: Array<T>, c: Array<T>) -> Result<Self, NumError> {
        if a_bar.shape() != bx.shape() || a_bar.shape() != c.shape() || a_bar.shape().len() != 3 {
            return Err(NumError::ShapeMismatch {
                op: "scan_inputs",
                left: a_bar.shape().to_vec(),
                right: bx.shape().to_vec(),
            });
        }
        Ok(ScanInputs { a_bar, bx, c })
    }

    pub fn seq_len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn d_inner(&self) -> usize {
        self.a_bar.shape()[1]
    }

    pub fn d_state(&self) -> usize {
        self.a_bar.shape()[2]
    }
}

/// Data-dependent selection: step sizes, input map and readout as affine
/// functions of the stream.
///
/// Returns `(delta [L, d_inner], b [L, d_state], c [L, d_state])` with
/// `delta = softplus(x·delta_proj + delta_bias) > 0`.
pub fn select_params<T: Scalar>(
    x: &Array<T>,
    params: &SsmBlockParams<T>,
) -> Result<(Array<T>, Array<T>, Array<T>), NumError> {
    let (l, d) = (x.rows(), x.cols());
    if d != params.d_inner {
        return Err(NumError::ShapeMismatch {
            op: "select_params",
            left: x.shape().to_vec(),
            right: params.delta_proj.shape().to_vec(),
        });
    }
    let n = params.d_state;
    let raw = crate::numerics::matmul(x, &params.delta_proj)?; // [L,1]
    let bias = params.delta_bias.as_slice();
    let mut delta = Vec::with_capacity(l * d);
    for t in 0..l {
        let r = raw.as_slice()[t];
        for bi in bias.iter().take(d) {
            delta.push(kernels::softplus_scalar(r + *bi));
        }
    }
    let delta = Array::from_vec(&[l, d], delta)?;
    let b = crate::numerics::matmul(x, &params.b_proj)?;
    let c = crate::numerics::matmul(x, &params.c_proj)?;
    debug_assert_eq!(b.shape(), &[l, n]);
    Ok((delta, b, c))
}

/// Zero-order-hold discretization, materializing the per-timestep
/// coefficients: `ā[t,d,n] = exp(Δ[t,d]·A[d,n])`, `b̄x[t,d,n] =
/// Δ[t,d]·b[t,n]·x[t,d]`, and the readout broadcast across channels.
pub fn discretize_zoh<T: Scalar>(
    a: &Array<T>,
    delta: &Array<T>,
    b: &Array<T>,
    c: &Array<T>,
    x: &Array<T>,
) -> Result<ScanInputs<T>, NumError> {
    let (d, n) = (a.rows(), a.cols());
    let l = delta.rows();
    if delta.cols() != d || b.rows() != l || b.cols() != n || x.rows() != l || x.cols() != d
        || c.rows() != l || c.cols() != n
    {
        return Err(NumError::ShapeMismatch {
            op: "discretize_zoh",
            left: delta.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    for &av in a.as_slice() {
        if av >= T::zero() {
            return Err(NumError::InvalidParam(
                "discretize_zoh requires strictly negative transition entries".into(),
            ));
        }
    }
    let (avs, dels, bs, cs, xs) = (
        a.as_slice(),
        delta.as_slice(),
        b.as_slice(),
        c.as_slice(),
        x.as_slice(),
    );
    let mut a_bar = Vec::with_capacity(l * d * n);
    let mut bx = Vec::with_capacity(l * d * n);
    let mut cc = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for di in 0..d {
            let dt = dels[t * d + di];
            let xv = xs[t * d + di];
            for ni in 0..n {
                a_bar.push((dt * avs[di * n + ni]).exp());
                bx.push(dt * bs[t * n + ni] * xv);
                cc.push(cs[t * n + ni]);
            }
        }
    }
    ScanInputs::new(
        Array::from_vec(&[l, d, n], a_bar)?,
        Array::from_vec(&[l, d, n], bx)?,
        Array::from_vec(&[l, d, n], cc)?,
    )
}

fn scan_readout<T: Scalar>(s: &ScanInputs<T>, h: &[T]) -> Result<Array<T>, NumError> {
    let (l, d, n) = (s.seq_len(), s.d_inner(), s.d_state());
    let cs = s.c.as_slice();
    let mut y = Vec::with_capacity(l * d);
    for t in 0..l {
        for di in 0..d {
            let base = (t * d + di) * n;
            let mut acc = T::zero();
            for ni in 0..n {
                acc += cs[base + ni] * h[base + ni];
            }
            y.push(acc);
        }
    }
    Array::from_vec(&[l, d], y)
}

/// Sequential evaluation of `h_t = ā_t ⊙ h_{t-1} + b̄x_t`,
/// `y[t,d] = Σ_n c[t,d,n]·h[t,d,n]`; linear time, constant state per lane.
pub fn scan_recurrent<T: Scalar>(s: &ScanInputs<T>) -> Result<Array<T>, NumError> {
    let (l, d, n) = (s.seq_len(), s.d_inner(), s.d_state());
    let mut h = vec![T::zero(); l * d * n];
    kernels::scan_recurrent_lanes(s.a_bar.as_slice(), s.bx.as_slice(), l, d * n, &mut h);
    scan_readout(s, &h)
}

/// Work-efficient parallel evaluation of the same recurrence via the
/// associative combine `(a₂,b₂)∘(a₁,b₁) = (a₂·a₁, a₂·b₁+b₂)`; agrees with
/// [`scan_recurrent`] to dtype tolerance.
pub fn scan_parallel<T: Scalar>(s: &ScanInputs<T>) -> Result<Array<T>, NumError> {
    let (l, d, n) = (s.seq_len(), s.d_inner(), s.d_state());
    let mut h = vec![T::zero(); l * d * n];
    kernels::scan_blelloch_lanes(s.a_bar.as_slice(), s.bx.as_slice(), l, d * n, &mut h);
    scan_readout(s, &h)
}

/// Depthwise causal convolution: `out[t,d] = Σ_w kernel[d,w]·x[t-W+1+w, d]`
/// with zero left-padding. Strictly causal, no bias.
pub fn depthwise_causal_conv<T: Scalar>(
    x: &Array<T>,
    kernel: &Array<T>,
) -> Result<Array<T>, NumError> {
    let (l, d) = (x.rows(), x.cols());
    let (dk, w) = (kernel.rows(), kernel.cols());
    if dk != d {
        return Err(NumError::ShapeMismatch {
            op: "depthwise_causal_conv",
            left: x.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); l * d];
    kernels::conv1d_causal(x.as_slice(), kernel.as_slice(), l, d, w, &mut out);
    Array::from_vec(&[l, d], out)
}

/// Graph-node handles for one block's parameters.
pub struct SsmBlockNodes {
    pub in_proj: NodeId,
    pub a_log: NodeId,
    pub delta_proj: NodeId,
    pub delta_bias: NodeId,
    pub b_proj: NodeId,
    pub c_proj: NodeId,
    pub conv_kernel: NodeId,
    pub d_skip: NodeId,
    pub out_proj: NodeId,
}

impl SsmBlockNodes {
    pub fn insert<T: Scalar>(g: &mut Graph<T>, p: &SsmBlockParams<T>) -> Self {
        SsmBlockNodes {
            in_proj: g.param(p.in_proj.clone()),
            a_log: g.param(p.a_log.clone()),
            delta_proj: g.param(p.delta_proj.clone()),
            delta_bias: g.param(p.delta_bias.clone()),
            b_proj: g.param(p.b_proj.clone()),
            c_proj: g.param(p.c_proj.clone()),
            conv_kernel: g.param(p.conv_kernel.clone()),
            d_skip: g.param(p.d_skip.clone()),
            out_proj: g.param(p.out_proj.clone()),
        }
    }

    /// From a flat id list in field order (used by gradient checking).
    pub fn from_ids(ids: &[NodeId]) -> Self {
        SsmBlockNodes {
            in_proj: ids[0],
            a_log: ids[1],
            delta_proj: ids[2],
            delta_bias: ids[3],
            b_proj: ids[4],
            c_proj: ids[5],
            conv_kernel: ids[6],
            d_skip: ids[7],
            out_proj: ids[8],
        }
    }
}

/// Builds the gated block on the tape:
/// input projection → depthwise causal conv → SiLU → selection →
/// discretized scan → skip path → SiLU gate → output projection.
pub fn build_mamba_block<T: Scalar>(
    g: &mut Graph<T>,
    u: NodeId,
    nodes: &SsmBlockNodes,
    d_inner: usize,
    mode: ScanMode,
) -> Result<NodeId, NumError> {
    let xz = g.matmul(u, nodes.in_proj)?;
    g.ensure_finite(xz, "in_projection")?;
    let x = g.slice_cols(xz, 0, d_inner)?;
    let z = g.slice_cols(xz, d_inner, 2 * d_inner)?;

    let xc = g.conv1d_causal(x, nodes.conv_kernel)?;
    let xs = g.silu(xc)?;
    g.ensure_finite(xs, "conv")?;

    let draw = g.matmul(xs, nodes.delta_proj)?;
    let dcol = g.broadcast_col(draw, d_inner)?;
    let dsum = g.add_row(dcol, nodes.delta_bias)?;
    let delta = g.softplus(dsum)?;
    let b = g.matmul(xs, nodes.b_proj)?;
    let c = g.matmul(xs, nodes.c_proj)?;
    g.ensure_finite(delta, "selection")?;

    let a_exp = g.exp(nodes.a_log)?;
    let a = g.neg(a_exp)?;
    let y = g.selective_scan(a, delta, b, c, xs, mode)?;
    g.ensure_finite(y, "scan")?;

    let skip = g.mul_row(xs, nodes.d_skip)?;
    let y = g.add(y, skip)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    g.ensure_finite(y, "gate")?;

    let out = g.matmul(y, nodes.out_proj)?;
    g.ensure_finite(out, "out_projection")?;
    Ok(out)
}

/// Full block forward pass as a plain function of `(input, params)`;
/// both modes produce equal outputs within dtype tolerance.
pub fn mamba_block_forward<T: Scalar>(
    u: &Array<T>,
    params: &SsmBlockParams<T>,
    mode: ScanMode,
) -> Result<Array<T>, NumError> {
    if u.cols() != params.d_model {
        return Err(NumError::ShapeMismatch {
            op: "mamba_block_forward",
            left: u.shape().to_vec(),
            right: vec![params.d_model],
        });
    }
    let mut g: Graph<T> = Graph::new();
    let un = g.input(u.clone());
    let nodes = SsmBlockNodes::insert(&mut g, params);
    let out = build_mamba_block(&mut g, un, &nodes, params.d_inner, mode)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_vec(shape, v.to_vec()).unwrap()
    }

    fn test_params(d_model: usize, d_state: usize, w: usize, seed: u64) -> SsmBlockParams<f64> {
        let mut rng = SeededRng::new(seed);
        SsmBlockParams::init(d_model, d_state, w, 2, &mut rng).unwrap()
    }

    #[test]
    fn select_params_zero_input() {
        let p = test_params(4, 3, 2, 1);
        let x = Array::<f64>::zeros(&[5, p.d_inner]).unwrap();
        let (delta, b, c) = select_params(&x, &p).unwrap();
        // delta = softplus(bias) per channel, independent of t
        for t in 0..5 {
            for d in 0..p.d_inner {
                let expect =
                    (1.0 + p.delta_bias.as_slice()[d].exp()).ln();
                assert!((delta.at2(t, d) - expect).abs() < 1e-12);
                assert!(delta.at2(t, d) > 0.0);
            }
        }
        assert!(b.as_slice().iter().all(|&v| v == 0.0));
        assert!(c.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn select_params_zero_bias_gives_ln2() {
        let mut p = test_params(4, 3, 2, 2);
        p.delta_bias = Array::zeros(&[p.d_inner]).unwrap();
        let x = Array::<f64>::zeros(&[2, p.d_inner]).unwrap();
        let (delta, _, _) = select_params(&x, &p).unwrap();
        for &v in delta.as_slice() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn select_params_matches_direct_affine_maps() {
        let p = test_params(2, 2, 2, 3); // d_inner = 4, but spec example wants d_inner=2
        let mut rng = SeededRng::new(9);
        let l = 4;
        let x: Array<f64> = rng.normal_array(&[l, p.d_inner], 1.0).unwrap();
        let (delta, b, c) = select_params(&x, &p).unwrap();
        // straightforward re-evaluation with explicit loops
        for t in 0..l {
            let mut raw = 0.0;
            for d in 0..p.d_inner {
                raw += x.at2(t, d) * p.delta_proj.at2(d, 0);
            }
            for d in 0..p.d_inner {
                let z: f64 = raw + p.delta_bias.as_slice()[d];
                let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
                assert!((delta.at2(t, d) - sp).abs() < 1e-12);
            }
            for n in 0..p.d_state {
                let mut bb = 0.0;
                let mut cc = 0.0;
                for d in 0..p.d_inner {
                    bb += x.at2(t, d) * p.b_proj.at2(d, n);
                    cc += x.at2(t, d) * p.c_proj.at2(d, n);
                }
                assert!((b.at2(t, n) - bb).abs() < 1e-12);
                assert!((c.at2(t, n) - cc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discretize_scalar_cases() {
        let a = arr(&[1, 1], &[-1.0]);
        let b = arr(&[1, 1], &[1.0]);
        let c = arr(&[1, 1], &[1.0]);
        let x = arr(&[1, 1], &[1.0]);

        let s = discretize_zoh(&a, &arr(&[1, 1], &[std::f64::consts::LN_2]), &b, &c, &x).unwrap();
        assert!((s.a_bar.as_slice()[0] - 0.5).abs() < 1e-15);

        // boundary delta = 0: identity transition, zero input
        let s0 = discretize_zoh(&a, &arr(&[1, 1], &[0.0]), &b, &c, &x).unwrap();
        assert_eq!(s0.a_bar.as_slice()[0], 1.0);
        assert_eq!(s0.bx.as_slice()[0], 0.0);

        // very large delta: state reset
        let sb = discretize_zoh(&a, &arr(&[1, 1], &[1e6]), &b, &c, &x).unwrap();
        assert!(sb.a_bar.as_slice()[0] < 1e-300);

        // non-negative transition entries violate the invariant
        let bad = arr(&[1, 1], &[0.0]);
        assert!(discretize_zoh(&bad, &arr(&[1, 1], &[1.0]), &b, &c, &x).is_err());
    }

    fn hand_inputs() -> ScanInputs<f64> {
        ScanInputs::new(
            arr(&[3, 1, 1], &[0.5, 0.5, 0.5]),
            arr(&[3, 1, 1], &[1.0, 1.0, 1.0]),
            arr(&[3, 1, 1], &[1.0, 1.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn scan_recurrent_hand_example() {
        let y = scan_recurrent(&hand_inputs()).unwrap();
        let expect = [1.0, 1.5, 1.75];
        for (a, b) in y.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_zero_input_stays_zero() {
        let s = ScanInputs::new(
            arr(&[4, 1, 2], &[0.9; 8]),
            Array::zeros(&[4, 1, 2]).unwrap(),
            arr(&[4, 1, 2], &[1.0; 8]),
        )
        .unwrap();
        assert!(scan_recurrent(&s).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_full_reset_is_memoryless() {
        let mut rng = SeededRng::new(5);
        let bx: Array<f64> = rng.normal_array(&[5, 2, 2], 1.0).unwrap();
        let c: Array<f64> = rng.normal_array(&[5, 2, 2], 1.0).unwrap();
        let s = ScanInputs::new(Array::zeros(&[5, 2, 2]).unwrap(), bx.clone(), c.clone()).unwrap();
        let y = scan_recurrent(&s).unwrap();
        for t in 0..5 {
            for d in 0..2 {
                let mut expect = 0.0;
                for n in 0..2 {
                    let idx = (t * 2 + d) * 2 + n;
                    expect += c.as_slice()[idx] * bx.as_slice()[idx];
                }
                assert!((y.at2(t, d) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scan_parallel_matches_hand_example_and_single_element() {
        let y = scan_parallel(&hand_inputs()).unwrap();
        let expect = [1.0, 1.5, 1.75];
        for (a, b) in y.as_slice().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let one = ScanInputs::new(
            arr(&[1, 1, 1], &[0.3]),
            arr(&[1, 1, 1], &[2.0]),
            arr(&[1, 1, 1], &[4.0]),
        )
        .unwrap();
        assert!((scan_parallel(&one).unwrap().as_slice()[0] - 8.0).abs() < 1e-15);
    }

    fn random_scan_inputs(l: usize, d: usize, n: usize, seed: u64) -> ScanInputs<f64> {
        let mut rng = SeededRng::new(seed);
        let count = l * d * n;
        let a_bar: Vec<f64> = (0..count).map(|_| rng.uniform().max(1e-12)).collect();
        let bx: Vec<f64> = (0..count).map(|_| rng.normal()).collect();
        let c: Vec<f64> = (0..count).map(|_| rng.normal()).collect();
        ScanInputs::new(
            arr(&[l, d, n], &a_bar),
            arr(&[l, d, n], &bx),
            arr(&[l, d, n], &c),
        )
        .unwrap()
    }

    fn max_rel_dev(a: &Array<f64>, b: &Array<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn scan_parallel_matches_recurrent_long() {
        let s = random_scan_inputs(4096, 2, 2, 77);
        let yr = scan_recurrent(&s).unwrap();
        let yp = scan_parallel(&s).unwrap();
        let dev = max_rel_dev(&yp, &yr);
        assert!(dev < 1e-10, "dev {dev}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SeededRng::new(3);
        let x: Array<f64> = rng.normal_array(&[6, 3], 1.0).unwrap();
        // kernel [0, ..., 0, 1] per channel selects the current position
        let mut k = vec![0.0; 3 * 4];
        for d in 0..3 {
            k[d * 4 + 3] = 1.0;
        }
        let y = depthwise_causal_conv(&x, &arr(&[3, 4], &k)).unwrap();
        assert_eq!(y.as_slice(), x.as_slice());
    }

    #[test]
    fn conv_impulse_response() {
        let w = 3;
        let l = 6;
        let mut x = vec![0.0; l];
        x[0] = 1.0; // impulse at the first position
        let y = depthwise_causal_conv(&arr(&[l, 1], &x), &arr(&[1, w], &[1.0; 3])).unwrap();
        for t in 0..l {
            let expect = if t < w.min(l) { 1.0 } else { 0.0 };
            assert_eq!(y.at2(t, 0), expect, "t={t}");
        }
    }

    #[test]
    fn conv_is_causal_bitwise() {
        let mut rng = SeededRng::new(8);
        let x: Array<f64> = rng.normal_array(&[8, 2], 1.0).unwrap();
        let k: Array<f64> = rng.normal_array(&[2, 4], 1.0).unwrap();
        let y = depthwise_causal_conv(&x, &k).unwrap();
        let mut x2 = x.as_slice().to_vec();
        let t = 4;
        for tt in (t + 1)..8 {
            for d in 0..2 {
                x2[tt * 2 + d] += 7.0;
            }
        }
        let y2 = depthwise_causal_conv(&arr(&[8, 2], &x2), &k).unwrap();
        assert_eq!(&y.as_slice()[..(t + 1) * 2], &y2.as_slice()[..(t + 1) * 2]);
    }

    #[test]
    fn block_modes_agree_and_zero_preserves() {
        let p = test_params(4, 2, 3, 21);
        let mut rng = SeededRng::new(22);
        let u: Array<f64> = rng.normal_array(&[16, 4], 1.0).unwrap();
        let yr = mamba_block_forward(&u, &p, ScanMode::Recurrent).unwrap();
        let yp = mamba_block_forward(&u, &p, ScanMode::Parallel).unwrap();
        assert!(max_rel_dev(&yp, &yr) < 1e-9);

        let zero = Array::<f64>::zeros(&[16, 4]).unwrap();
        let yz = mamba_block_forward(&zero, &p, ScanMode::Recurrent).unwrap();
        assert!(yz.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_causal() {
        let p = test_params(3, 2, 2, 31);
        let mut rng = SeededRng::new(32);
        let u: Array<f64> = rng.normal_array(&[10, 3], 1.0).unwrap();
        let y = mamba_block_forward(&u, &p, ScanMode::Recurrent).unwrap();
        let t = 5;
        let mut u2 = u.as_slice().to_vec();
        for tt in (t + 1)..10 {
            for d in 0..3 {
                u2[tt * 3 + d] = rng.normal();
            }
        }
        let u2 = arr(&[10, 3], &u2);
        let y2r = mamba_block_forward(&u2, &p, ScanMode::Recurrent).unwrap();
        // recurrent mode: bit-unchanged prefix
        assert_eq!(&y.as_slice()[..(t + 1) * 3], &y2r.as_slice()[..(t + 1) * 3]);
        // parallel mode: same prefix within tolerance
        let y2p = mamba_block_forward(&u2, &p, ScanMode::Parallel).unwrap();
        for i in 0..(t + 1) * 3 {
            assert!((y.as_slice()[i] - y2p.as_slice()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let p = test_params(4, 2, 2, 41);
        let mut rng = SeededRng::new(42);
        let u: Array<f64> = rng.normal_array(&[8, 4], 0.8).unwrap();
        for mode in [ScanMode::Recurrent, ScanMode::Parallel] {
            let params = vec![
                p.in_proj.clone(),
                p.a_log.clone(),
                p.delta_proj.clone(),
                p.delta_bias.clone(),
                p.b_proj.clone(),
                p.c_proj.clone(),
                p.conv_kernel.clone(),
                p.d_skip.clone(),
                p.out_proj.clone(),
            ];
            // mean-scaled objective and eps=1e-4 keep the central-difference
            // side well conditioned; the a_log path is a double exponential
            // with gradient entries near 1e-9
            let rel = grad_check(
                |g, ids| {
                    let un = g.input(u.clone());
                    let nodes = SsmBlockNodes::from_ids(ids);
                    let out = build_mamba_block(g, un, &nodes, p.d_inner, mode)?;
                    let numel = g.value(out).len() as f64;
                    let s = g.sum_all(out)?;
                    g.affine(s, 1.0 / numel, 0.0)
                },
                &params,
                1e-4,
            )
            .unwrap();
            assert!(rel < 1e-5, "mode {:?} rel {rel}", mode);
        }
    }

    #[test]
    fn stability_bound_on_synthetic_streams() {
        // with delta > 0 and a < 0, a_bar in (0,1); bounded inputs give
        // |h_t| <= M / (1 - max a_bar)
        let l = 200;
        let mut rng = SeededRng::new(55);
        let a_bar: Vec<f64> = (0..l).map(|_| 0.2 + 0.7 * rng.uniform()).collect();
        let m = 3.0;
        let bx: Vec<f64> = (0..l).map(|_| m * (2.0 * rng.uniform() - 1.0)).collect();
        let max_abar = a_bar.iter().cloned().fold(0.0, f64::max);
        assert!(max_abar < 1.0);
        let mut h = vec![0.0; l];
        kernels::scan_recurrent_lanes(&a_bar, &bx, l, 1, &mut h);
        let bound = m / (1.0 - max_abar);
        for &v in &h {
            assert!(v.abs() <= bound + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_scan_modes_agree(l in 1usize..64, d in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
            let s = random_scan_inputs(l, d, n, seed);
            let yr = scan_recurrent(&s).unwrap();
            let yp = scan_parallel(&s).unwrap();
            prop_assert!(max_rel_dev(&yp, &yr) < 1e-10);
        }
    }
}
