use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How out-of-range input positions are filled before the valid convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zeros,
    Circular,
    Reflect,
    Replicate,
}

impl PaddingMode {
    pub const ALL: [PaddingMode; 4] =
        [PaddingMode::Zeros, PaddingMode::Circular, PaddingMode::Reflect, PaddingMode::Replicate];

    pub fn name(self) -> &'static str {
        match self {
            PaddingMode::Zeros => "zeros",
            PaddingMode::Circular => "circular",
            PaddingMode::Reflect => "reflect",
            PaddingMode::Replicate => "replicate",
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(PaddingMode::Zeros),
            "circular" => Ok(PaddingMode::Circular),
            "reflect" => Ok(PaddingMode::Reflect),
            "replicate" => Ok(PaddingMode::Replicate),
            other => Err(Error::Format(format!("unknown padding mode {other:?}"))),
        }
    }
}

/// Amount of padding per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadAmount {
    /// `[p_h, p_w]` on both sides of each axis.
    Symmetric([usize; 2]),
    /// `floor(k/2)` before and `k - 1 - floor(k/2)` after, per axis. The
    /// output keeps the input extent at stride 1 for any kernel size.
    Same,
    /// `[[top, bottom], [left, right]]`
    Explicit([[usize; 2]; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvRank {
    One,
    Two,
}

/// Cross-correlation layer (the deep-learning "convolution") with an explicit
/// padding pre-map. A 1-D convolution is stored as a 2-D one with unit
/// height.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `[c_out, c_in, k_h, k_w]`
    pub(crate) kernel: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) stride: [usize; 2],
    pub(crate) padding: PaddingMode,
    /// `[[top, bottom], [left, right]]`
    pub(crate) pad: [[usize; 2]; 2],
    /// `(c_in, h, w)`
    pub(crate) input: [usize; 3],
    pub(crate) rank: ConvRank,
}

struct Geometry {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
    sh: usize,
    sw: usize,
}

impl ConvSpec {
    /// 2-D convolution over inputs of shape `[c_in, h, w]`.
    pub fn conv2d(
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: [usize; 2],
        padding: PaddingMode,
        pad: PadAmount,
        input_shape: [usize; 3],
    ) -> Result<Self> {
        let (kh, kw) = match kernel.shape() {
            &[_, _, kh, kw] => (kh, kw),
            other => {
                return Err(Error::Invariant(format!("conv2d kernel must be [c_out, c_in, k_h, k_w], got {other:?}")))
            }
        };
        let pad = match pad {
            PadAmount::Symmetric([ph, pw]) => [[ph, ph], [pw, pw]],
            PadAmount::Same => [[kh / 2, kh - 1 - kh / 2], [kw / 2, kw - 1 - kw / 2]],
            PadAmount::Explicit(p) => p,
        };
        Self::build(kernel, bias, stride, padding, pad, input_shape, ConvRank::Two)
    }

    /// 1-D convolution over inputs of shape `[c_in, n]`; the kernel is
    /// `[c_out, c_in, k]`. `PadAmount::Symmetric([_, p])` pads `p` per side.
    pub fn conv1d(
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: PaddingMode,
        pad: PadAmount,
        input_shape: [usize; 2],
    ) -> Result<Self> {
        let (c_out, c_in, k) = match kernel.shape() {
            &[c_out, c_in, k] => (c_out, c_in, k),
            other => return Err(Error::Invariant(format!("conv1d kernel must be [c_out, c_in, k], got {other:?}"))),
        };
        let pad = match pad {
            PadAmount::Symmetric([_, p]) => [[0, 0], [p, p]],
            PadAmount::Same => [[0, 0], [k / 2, k - 1 - k / 2]],
            PadAmount::Explicit([_, lr]) => [[0, 0], lr],
        };
        let kernel = kernel.reshape(vec![c_out, c_in, 1, k])?;
        Self::build(kernel, bias, [1, stride], padding, pad, [input_shape[0], 1, input_shape[1]], ConvRank::One)
    }

    pub(crate) fn build(
        kernel: Tensor,
        bias: Option<Tensor>,
        stride: [usize; 2],
        padding: PaddingMode,
        pad: [[usize; 2]; 2],
        input: [usize; 3],
        rank: ConvRank,
    ) -> Result<Self> {
        let &[c_out, c_in, kh, kw] = kernel.shape() else {
            return Err(Error::Invariant("conv kernel must have rank 4".into()));
        };
        let bias = bias.unwrap_or_else(|| Tensor::zeros(vec![c_out]));
        if bias.shape() != [c_out] {
            return Err(Error::Invariant(format!("conv bias must have shape [{c_out}], got {:?}", bias.shape())));
        }
        if input[0] != c_in {
            return Err(Error::Invariant(format!(
                "kernel expects {c_in} input channels but input shape has {}",
                input[0]
            )));
        }
        if input.contains(&0) {
            return Err(Error::Invariant(format!("input shape {input:?} has a zero extent")));
        }
        if stride.contains(&0) {
            return Err(Error::Invariant("stride must be positive".into()));
        }
        for (axis, (&[before, after], extent)) in pad.iter().zip([input[1], input[2]]).enumerate() {
            let p = before.max(after);
            match padding {
                PaddingMode::Reflect if p >= extent => {
                    return Err(Error::Invariant(format!(
                        "reflect padding {p} must be smaller than the spatial extent {extent} (axis {axis})"
                    )))
                }
                PaddingMode::Circular if p > extent => {
                    return Err(Error::Invariant(format!(
                        "circular padding {p} must not exceed the spatial extent {extent} (axis {axis})"
                    )))
                }
                _ => {}
            }
        }
        let hp = input[1] + pad[0][0] + pad[0][1];
        let wp = input[2] + pad[1][0] + pad[1][1];
        if kh > hp || kw > wp {
            return Err(Error::Invariant(format!("kernel {kh}x{kw} does not fit the padded input {hp}x{wp}")));
        }
        Ok(Self { kernel, bias, stride, padding, pad, input, rank })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> [usize; 2] {
        self.stride
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    /// `[[top, bottom], [left, right]]`
    pub fn pad(&self) -> [[usize; 2]; 2] {
        self.pad
    }

    pub fn rank(&self) -> ConvRank {
        self.rank
    }

    pub fn in_channels(&self) -> usize {
        self.input[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_hw(&self) -> [usize; 2] {
        [self.kernel.shape()[2], self.kernel.shape()[3]]
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self.rank {
            ConvRank::One => vec![self.input[0], self.input[2]],
            ConvRank::Two => self.input.to_vec(),
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let g = self.geometry();
        match self.rank {
            ConvRank::One => vec![g.c_out, g.ow],
            ConvRank::Two => vec![g.c_out, g.oh, g.ow],
        }
    }

    /// Same layer with its kernel replaced; shapes must agree.
    pub fn with_kernel(&self, kernel: Tensor) -> Result<Self> {
        if kernel.shape() != self.kernel.shape() {
            return Err(Error::shape(self.kernel.shape(), kernel.shape()));
        }
        Ok(Self { kernel, ..self.clone() })
    }

    fn geometry(&self) -> Geometry {
        let s = self.kernel.shape();
        let (h, w) = (self.input[1], self.input[2]);
        let hp = h + self.pad[0][0] + self.pad[0][1];
        let wp = w + self.pad[1][0] + self.pad[1][1];
        Geometry {
            c_out: s[0],
            c_in: s[1],
            kh: s[2],
            kw: s[3],
            h,
            w,
            hp,
            wp,
            oh: (hp - s[2]) / self.stride[0] + 1,
            ow: (wp - s[3]) / self.stride[1] + 1,
            sh: self.stride[0],
            sw: self.stride[1],
        }
    }

    /// Source index along one axis for every padded position.
    fn axis_map(&self, len: usize, before: usize, after: usize) -> Vec<Option<usize>> {
        let n = len as isize;
        (0..len + before + after)
            .map(|i| {
                let j = i as isize - before as isize;
                match self.padding {
                    PaddingMode::Zeros => (0..n).contains(&j).then_some(j as usize),
                    PaddingMode::Circular => Some(j.rem_euclid(n) as usize),
                    PaddingMode::Reflect => {
                        let r = if j < 0 {
                            -j
                        } else if j >= n {
                            2 * (n - 1) - j
                        } else {
                            j
                        };
                        Some(r as usize)
                    }
                    PaddingMode::Replicate => Some(j.clamp(0, n - 1) as usize),
                }
            })
            .collect()
    }

    fn maps(&self, g: &Geometry) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        (self.axis_map(g.h, self.pad[0][0], self.pad[0][1]), self.axis_map(g.w, self.pad[1][0], self.pad[1][1]))
    }

    /// Padding pre-map `P x` on `lanes` interleaved inputs.
    fn pad_input(&self, g: &Geometry, x: &[f64], lanes: usize) -> Vec<f64> {
        let (mh, mw) = self.maps(g);
        let (hw, hwp) = (g.h * g.w * lanes, g.hp * g.wp * lanes);
        let mut xp = vec![0.0; g.c_in * hwp];
        for c in 0..g.c_in {
            let src = &x[c * hw..(c + 1) * hw];
            let dst = &mut xp[c * hwp..(c + 1) * hwp];
            for (a, sa) in mh.iter().enumerate() {
                let Some(sa) = sa else { continue };
                for (b, sb) in mw.iter().enumerate() {
                    if let Some(sb) = sb {
                        let (d, s) = ((a * g.wp + b) * lanes, (sa * g.w + sb) * lanes);
                        dst[d..d + lanes].copy_from_slice(&src[s..s + lanes]);
                    }
                }
            }
        }
        xp
    }

    /// `Pᵀ`: scatter-add padded positions back onto their sources.
    fn unpad_adjoint(&self, g: &Geometry, gp: &[f64], out: &mut [f64], lanes: usize) {
        let (mh, mw) = self.maps(g);
        let (hw, hwp) = (g.h * g.w * lanes, g.hp * g.wp * lanes);
        out.fill(0.0);
        for c in 0..g.c_in {
            let src = &gp[c * hwp..(c + 1) * hwp];
            let dst = &mut out[c * hw..(c + 1) * hw];
            for (a, sa) in mh.iter().enumerate() {
                let Some(sa) = sa else { continue };
                for (b, sb) in mw.iter().enumerate() {
                    if let Some(sb) = sb {
                        let (d, s) = ((sa * g.w + sb) * lanes, (a * g.wp + b) * lanes);
                        for (o, v) in dst[d..d + lanes].iter_mut().zip(&src[s..s + lanes]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }

    fn kidx(g: &Geometry, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * g.c_in + c) * g.kh + a) * g.kw + b
    }

    pub(crate) fn forward_linear(&self, x: &[f64], out: &mut [f64]) {
        self.forward_lanes(x, out, 1);
    }

    /// Forward pass on `lanes` inputs stored interleaved (`x[i * lanes + l]`).
    pub(crate) fn forward_lanes(&self, x: &[f64], out: &mut [f64], lanes: usize) {
        let g = self.geometry();
        let xp = self.pad_input(&g, x, lanes);
        let k = self.kernel.data();
        let (plane, pplane, orow) = (g.oh * g.ow * lanes, g.hp * g.wp * lanes, g.ow * lanes);
        out.fill(0.0);
        for o in 0..g.c_out {
            for i in 0..g.oh {
                let at = o * plane + i * orow;
                let dst = &mut out[at..at + orow];
                for c in 0..g.c_in {
                    let xc = &xp[c * pplane..(c + 1) * pplane];
                    for a in 0..g.kh {
                        for b in 0..g.kw {
                            let kv = k[Self::kidx(&g, o, c, a, b)];
                            let row = ((i * g.sh + a) * g.wp + b) * lanes;
                            if g.sw == 1 {
                                for (d, s) in dst.iter_mut().zip(&xc[row..row + orow]) {
                                    *d += kv * s;
                                }
                            } else {
                                for (j, d) in dst.chunks_exact_mut(lanes).enumerate() {
                                    let s = row + j * g.sw * lanes;
                                    for (d, s) in d.iter_mut().zip(&xc[s..s + lanes]) {
                                        *d += kv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn add_offset(&self, out: &mut [f64]) {
        let per = out.len() / self.out_channels();
        for (chunk, b) in out.chunks_exact_mut(per).zip(self.bias.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }

    /// Transposed convolution (zero insertion for strides) followed by `Pᵀ`.
    pub(crate) fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.adjoint_lanes(y, out, 1);
    }

    /// [`Self::adjoint`] on `lanes` interleaved inputs.
    pub(crate) fn adjoint_lanes(&self, y: &[f64], out: &mut [f64], lanes: usize) {
        let g = self.geometry();
        let k = self.kernel.data();
        let (plane, pplane, orow) = (g.oh * g.ow * lanes, g.hp * g.wp * lanes, g.ow * lanes);
        let mut gp = vec![0.0; g.c_in * pplane];
        for c in 0..g.c_in {
            let gc = &mut gp[c * pplane..(c + 1) * pplane];
            for o in 0..g.c_out {
                let yo = &y[o * plane..(o + 1) * plane];
                for i in 0..g.oh {
                    let src = &yo[i * orow..(i + 1) * orow];
                    for a in 0..g.kh {
                        for b in 0..g.kw {
                            let kv = k[Self::kidx(&g, o, c, a, b)];
                            let row = ((i * g.sh + a) * g.wp + b) * lanes;
                            if g.sw == 1 {
                                for (d, s) in gc[row..row + orow].iter_mut().zip(src) {
                                    *d += kv * s;
                                }
                            } else {
                                for (j, s) in src.chunks_exact(lanes).enumerate() {
                                    let d = row + j * g.sw * lanes;
                                    for (d, s) in gc[d..d + lanes].iter_mut().zip(s) {
                                        *d += kv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.unpad_adjoint(&g, &gp, out, lanes);
    }

    /// Kernel-shaped correlation between the padded input and the residual.
    pub(crate) fn param_grad(&self, x: &[f64], residual: &[f64]) -> Tensor {
        let g = self.geometry();
        let xp = self.pad_input(&g, x, 1);
        let mut dk = vec![0.0; self.kernel.len()];
        for o in 0..g.c_out {
            let ro = &residual[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            for c in 0..g.c_in {
                let xc = &xp[c * g.hp * g.wp..(c + 1) * g.hp * g.wp];
                for a in 0..g.kh {
                    for b in 0..g.kw {
                        let mut acc = 0.0;
                        for i in 0..g.oh {
                            let row = (i * g.sh + a) * g.wp + b;
                            let r = &ro[i * g.ow..(i + 1) * g.ow];
                            if g.sw == 1 {
                                acc += r.iter().zip(&xc[row..row + g.ow]).map(|(p, q)| p * q).sum::<f64>();
                            } else {
                                acc += r.iter().enumerate().map(|(j, p)| p * xc[row + j * g.sw]).sum::<f64>();
                            }
                        }
                        dk[Self::kidx(&g, o, c, a, b)] = acc;
                    }
                }
            }
        }
        Tensor::new(self.kernel.shape().to_vec(), dk).expect("kernel shape")
    }
}
