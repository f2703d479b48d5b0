//! 2-D cross-correlation kernels.
//!
//! Every convolution is lowered to im2col followed by a GEMM per group.
//! Depthwise convolutions are the `groups == channels` special case and
//! share the same path. Reflect padding is handled in the index mapping,
//! so col2im accumulates gradients from mirrored taps back onto the
//! interior pixel they were read from.

use std::borrow::Cow;

use crate::error::{mismatch, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Mirror without repeating the edge sample (`[a b c | b a]`).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            pad_mode: PadMode::Zero,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride-1 convolution that preserves spatial size for an odd `kernel`.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }
}

/// Output spatial extent: `floor((n + 2p - k) / s) + 1`.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Validated geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeometry {
    /// `input` is `[C,H,W]` or `[N,C,H,W]`; `weight` is `[Cout, Cin/groups, kh, kw]`.
    pub fn new(input: &[usize], weight: &[usize], opts: Conv2dOptions) -> Result<Self> {
        const OP: &str = "conv2d";
        let (batch, in_channels, height, width) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(mismatch(OP, "input rank", format!("expected 3 or 4 dims, got {input:?}"))),
        };
        let [out_channels, per_group, kernel_h, kernel_w] = *weight else {
            return Err(mismatch(OP, "weight rank", format!("expected 4 dims, got {weight:?}")));
        };
        if opts.groups == 0 || opts.stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("stride and groups must be positive, got {opts:?}"),
            });
        }
        if in_channels % opts.groups != 0 || out_channels % opts.groups != 0 {
            return Err(mismatch(
                OP,
                "channels",
                format!(
                    "in {in_channels} / out {out_channels} not divisible by groups {}",
                    opts.groups
                ),
            ));
        }
        if per_group != in_channels / opts.groups {
            return Err(mismatch(
                OP,
                "channels",
                format!(
                    "weight expects {per_group} input channels per group, input provides {}",
                    in_channels / opts.groups
                ),
            ));
        }
        if opts.pad_mode == PadMode::Reflect && (opts.padding >= height || opts.padding >= width) {
            return Err(mismatch(
                OP,
                "height/width",
                format!("reflect padding {} needs spatial dims > padding, got {height}x{width}", opts.padding),
            ));
        }
        let out_h = conv_output_len(height, kernel_h, opts.stride, opts.padding)
            .ok_or_else(|| mismatch(OP, "height", format!("kernel {kernel_h} larger than padded height {height}")))?;
        let out_w = conv_output_len(width, kernel_w, opts.stride, opts.padding)
            .ok_or_else(|| mismatch(OP, "width", format!("kernel {kernel_w} larger than padded width {width}")))?;
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            out_h,
            out_w,
            opts,
        })
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.opts.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.opts.groups
    }

    /// Rows of the im2col matrix for one group.
    fn patch_len(&self) -> usize {
        self.cin_g() * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_pixels(&self) -> usize {
        self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    pub fn output_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.out_channels, self.out_h, self.out_w]
        } else {
            vec![self.batch, self.out_channels, self.out_h, self.out_w]
        }
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.patch_len() * self.out_pixels()) as u64
    }

    /// Source index along one axis for each (kernel tap, output position).
    fn tap_table(&self, n: usize, kernel: usize, out: usize) -> Vec<Option<usize>> {
        let mut table = Vec::with_capacity(kernel * out);
        for k in 0..kernel {
            for o in 0..out {
                let pos = (o * self.opts.stride + k) as isize - self.opts.padding as isize;
                table.push(source_index(pos, n, self.opts.pad_mode));
            }
        }
        table
    }
}

fn source_index(pos: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&pos) {
        return Some(pos as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let mirrored = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
            (0..n).contains(&mirrored).then_some(mirrored as usize)
        }
    }
}

struct TapTables {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl TapTables {
    fn new(g: &ConvGeometry) -> Self {
        Self {
            rows: g.tap_table(g.height, g.kernel_h, g.out_h),
            cols: g.tap_table(g.width, g.kernel_w, g.out_w),
        }
    }
}

/// Gathers the receptive fields of `cin_g` channels (starting at `channels`)
/// into a `[cin_g*kh*kw, out_h*out_w]` matrix.
fn im2col(g: &ConvGeometry, taps: &TapTables, channels: &[f64], cols: &mut [f64]) {
    let (hw, p) = (g.in_pixels(), g.out_pixels());
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &channels[c * hw..(c + 1) * hw];
        for ky in 0..g.kernel_h {
            let ys = &taps.rows[ky * g.out_h..(ky + 1) * g.out_h];
            for kx in 0..g.kernel_w {
                let xs = &taps.cols[kx * g.out_w..(kx + 1) * g.out_w];
                let dst = &mut cols[row * p..(row + 1) * p];
                for (oy, y) in ys.iter().enumerate() {
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match y {
                        Some(y) => {
                            let src = &plane[y * g.width..(y + 1) * g.width];
                            for (d, x) in dst_row.iter_mut().zip(xs) {
                                *d = x.map_or(0.0, |x| src[x]);
                            }
                        }
                        None => dst_row.fill(0.0),
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the input planes.
fn col2im(g: &ConvGeometry, taps: &TapTables, cols: &[f64], channels: &mut [f64]) {
    let (hw, p) = (g.in_pixels(), g.out_pixels());
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut channels[c * hw..(c + 1) * hw];
        for ky in 0..g.kernel_h {
            let ys = &taps.rows[ky * g.out_h..(ky + 1) * g.out_h];
            for kx in 0..g.kernel_w {
                let xs = &taps.cols[kx * g.out_w..(kx + 1) * g.out_w];
                let src = &cols[row * p..(row + 1) * p];
                for (oy, y) in ys.iter().enumerate() {
                    let Some(y) = y else { continue };
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    for (s, x) in src_row.iter().zip(xs) {
                        if let Some(x) = x {
                            dst[*x] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major GEMM `C = A·B + beta·C` with explicit (row, col) strides for A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm lhs out of bounds");
    assert!(b.len() >= span(k, n, b_strides), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches, the
    // strides are non-negative, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin_g, cout_g, kk, p) = (g.cin_g(), g.cout_g(), g.patch_len(), g.out_pixels());
    let hw = g.in_pixels();
    let taps = TapTables::new(g);
    let mut out = vec![0.0; g.batch * g.out_channels * p];
    let mut scratch = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
    for n in 0..g.batch {
        for grp in 0..g.opts.groups {
            let in_off = (n * g.in_channels + grp * cin_g) * hw;
            let channels = &input[in_off..in_off + cin_g * hw];
            let cols: &[f64] = if g.is_pointwise() {
                channels
            } else {
                im2col(g, &taps, channels, &mut scratch);
                &scratch
            };
            let out_off = (n * g.out_channels + grp * cout_g) * p;
            let dst = &mut out[out_off..out_off + cout_g * p];
            if let Some(bias) = bias {
                for (co, row) in dst.chunks_exact_mut(p).enumerate() {
                    row.fill(bias[grp * cout_g + co]);
                }
            }
            let w = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
            gemm(cout_g, kk, p, w, (kk as isize, 1), cols, (p as isize, 1), 1.0, dst);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_input, need_weight, need_bias) = need;
    let (cin_g, cout_g, kk, p) = (g.cin_g(), g.cout_g(), g.patch_len(), g.out_pixels());
    let hw = g.in_pixels();
    let taps = TapTables::new(g);
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let mut d_weight = need_weight.then(|| vec![0.0; weight.len()]);
    let mut d_bias = need_bias.then(|| vec![0.0; g.out_channels]);
    let mut scratch = vec![0.0; if g.is_pointwise() { 0 } else { kk * p }];
    let mut d_cols = vec![0.0; if need_input { kk * p } else { 0 }];

    for n in 0..g.batch {
        for grp in 0..g.opts.groups {
            let out_off = (n * g.out_channels + grp * cout_g) * p;
            let dy = &grad_out[out_off..out_off + cout_g * p];
            let in_off = (n * g.in_channels + grp * cin_g) * hw;

            if let Some(db) = d_bias.as_mut() {
                for (co, row) in dy.chunks_exact(p).enumerate() {
                    db[grp * cout_g + co] += row.iter().sum::<f64>();
                }
            }
            if let Some(dw) = d_weight.as_mut() {
                let channels = &input[in_off..in_off + cin_g * hw];
                let cols: Cow<[f64]> = if g.is_pointwise() {
                    Cow::Borrowed(channels)
                } else {
                    im2col(g, &taps, channels, &mut scratch);
                    Cow::Borrowed(&scratch[..])
                };
                let dw_g = &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                // dW = dY · colsᵀ
                gemm(cout_g, p, kk, dy, (p as isize, 1), &cols, (1, p as isize), 1.0, dw_g);
            }
            if let Some(dx) = d_input.as_mut() {
                let w = &weight[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let dx_g = &mut dx[in_off..in_off + cin_g * hw];
                if g.is_pointwise() {
                    // dX = Wᵀ · dY, accumulated directly.
                    gemm(kk, cout_g, p, w, (1, kk as isize), dy, (p as isize, 1), 1.0, dx_g);
                } else {
                    gemm(kk, cout_g, p, w, (1, kk as isize), dy, (p as isize, 1), 0.0, &mut d_cols);
                    col2im(g, &taps, &d_cols, dx_g);
                }
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
