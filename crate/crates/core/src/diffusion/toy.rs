//! Small three-level convolutional noise predictor.
//!
//! The network sees the noisy image, the guide image, a condition flag and a
//! 4-channel projection of the text embedding, and outputs a residual `F`.
//! Noise prediction goes through an x₀ parameterization:
//!
//! ```text
//! y = x_t/√ᾱ_t            σ² = (1−ᾱ_t)/ᾱ_t
//! x̂₀ = base + κ·(y − base) + c_out·F(c_in·(y − base), t, cond)
//! κ = s²/(s²+σ²)   c_out = s·σ/√(s²+σ²)   c_in = 1/√(s²+σ²)
//! ε̂ = (x_t − √ᾱ_t·x̂₀)/√(1−ᾱ_t)
//! ```
//!
//! `base` is the guide for conditional calls and 0.5 for unconditional ones;
//! `s` is the expected spread of `x₀ − base`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Condition, Denoiser, DiffusionError, NoiseSchedule};
use crate::embedding::Embedding;
use crate::image::ImageTensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"SGDN";
pub const WEIGHTS_VERSION: u8 = 1;
pub const WIDTHS: [usize; 3] = [8, 32, 64];
pub const TIME_FEATURES: usize = 16;
pub const TIME_HIDDEN: usize = 32;
pub const TEXT_CHANNELS: usize = 4;
/// noisy residual (3) + guide (3) + condition flag (1) + text (4)
pub const INPUT_CHANNELS: usize = 7 + TEXT_CHANNELS;
pub const COND_SIGMA_DATA: f64 = 0.1;
pub const UNCOND_SIGMA_DATA: f64 = 0.3;
pub const MIN_TRAIN_IMAGES: usize = 200;

const TIME_BIAS: usize = WIDTHS[0] + WIDTHS[1] + WIDTHS[2];

#[derive(Clone, Copy, Debug, PartialEq)]
struct Spec {
    cin: usize,
    cout: usize,
    k: usize,
}

// Parameter tensors in storage order.
const T1: usize = 0;
const T2: usize = 1;
const TXT: usize = 2;
const E1A: usize = 3;
const E1B: usize = 4;
const E2A: usize = 5;
const E2B: usize = 6;
const E3A: usize = 7;
const E3B: usize = 8;
const U2: usize = 9;
const D2: usize = 10;
const U1: usize = 11;
const D1: usize = 12;
const OUT: usize = 13;

fn specs(text_dim: usize) -> [Spec; 14] {
    let [c1, c2, c3] = WIDTHS;
    let s = |cin, cout, k| Spec { cin, cout, k };
    [
        s(TIME_FEATURES, TIME_HIDDEN, 1),
        s(TIME_HIDDEN, TIME_BIAS, 1),
        s(text_dim, TEXT_CHANNELS, 1),
        s(INPUT_CHANNELS, c1, 3),
        s(c1, c1, 3),
        s(c1, c2, 3),
        s(c2, c2, 3),
        s(c2, c3, 3),
        s(c3, c3, 3),
        s(c3, c2, 1),
        s(c2, c2, 3),
        s(c2, c1, 1),
        s(c1, c1, 3),
        s(c1, 3, 3),
    ]
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    specs: [Spec; 14],
    /// (weight offset, bias offset) per tensor.
    offsets: [(usize, usize); 14],
    total: usize,
}

impl Layout {
    fn new(text_dim: usize) -> Self {
        let specs = specs(text_dim);
        let mut offsets = [(0, 0); 14];
        let mut at = 0;
        for (o, s) in offsets.iter_mut().zip(&specs) {
            let nw = s.cout * s.cin * s.k * s.k;
            *o = (at, at + nw);
            at += nw + s.cout;
        }
        Self {
            specs,
            offsets,
            total: at,
        }
    }

    fn w<'a>(&self, p: &'a [f32], l: usize) -> &'a [f32] {
        &p[self.offsets[l].0..self.offsets[l].1]
    }

    fn b<'a>(&self, p: &'a [f32], l: usize) -> &'a [f32] {
        &p[self.offsets[l].1..self.offsets[l].1 + self.specs[l].cout]
    }

    fn wb_mut<'a>(&self, p: &'a mut [f32], l: usize) -> (&'a mut [f32], &'a mut [f32]) {
        let (ow, ob) = self.offsets[l];
        let (w, rest) = p[ow..ob + self.specs[l].cout].split_at_mut(ob - ow);
        (w, rest)
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| x * sigmoid(x)).collect()
}

/// `d ← d·silu'(z)`.
fn silu_back(d: &mut [f32], z: &[f32]) {
    for (g, &x) in d.iter_mut().zip(z) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all row-major; `ta`/`tb` read the
/// stored matrices transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly m×k, k×n and m×n elements,
    // and the lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut col = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward; returns the output and the column buffer kept for
/// the backward pass (empty for 1×1 layers, whose columns are the input).
fn conv(layout: &Layout, p: &[f32], l: usize, x: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let s = layout.specs[l];
    let hw = h * w;
    let col = if s.k == 3 { im2col(x, s.cin, h, w) } else { Vec::new() };
    let src = if s.k == 3 { &col[..] } else { x };
    let mut out = vec![0.0; s.cout * hw];
    for (o, &b) in out.chunks_mut(hw).zip(layout.b(p, l)) {
        o.fill(b);
    }
    gemm(s.cout, s.cin * s.k * s.k, hw, layout.w(p, l), false, src, false, 1.0, &mut out);
    (out, col)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx`.
#[allow(clippy::too_many_arguments)]
fn conv_back(
    layout: &Layout,
    p: &[f32],
    g: &mut [f32],
    l: usize,
    x: &[f32],
    col: &[f32],
    dout: &[f32],
    h: usize,
    w: usize,
    need_dx: bool,
) -> Option<Vec<f32>> {
    let s = layout.specs[l];
    let hw = h * w;
    let kk = s.cin * s.k * s.k;
    let src = if s.k == 3 { col } else { x };
    let (gw, gb) = layout.wb_mut(g, l);
    gemm(s.cout, hw, kk, dout, false, src, true, 1.0, gw);
    for (b, d) in gb.iter_mut().zip(dout.chunks(hw)) {
        *b += d.iter().sum::<f32>();
    }
    if !need_dx {
        return None;
    }
    let mut dcol = vec![0.0; kk * hw];
    gemm(kk, s.cout, hw, layout.w(p, l), true, dout, false, 0.0, &mut dcol);
    Some(if s.k == 3 { col2im(&dcol, s.cin, h, w) } else { dcol })
}

fn add_channel_bias(x: &mut [f32], bias: &[f32], hw: usize) {
    for (plane, b) in x.chunks_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(x: &[f32], hw: usize) -> Vec<f32> {
    x.chunks(hw).map(|p| p.iter().sum()).collect()
}

fn avgpool(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[ci * h * w + (2 * y + dy) * w + 2 * xx + dx];
                out[ci * oh * ow + y * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling; `scale` multiplies every value.
fn upsample(x: &[f32], c: usize, h: usize, w: usize, scale: f32) -> Vec<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ci * oh * ow + y * ow + xx] = scale * x[ci * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of nearest upsampling: sums each 2×2 block.
fn sumpool(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = avgpool(x, c, h, w);
    out.iter_mut().for_each(|v| *v *= 4.0);
    out
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sinusoidal features of `t/T`.
fn time_features(t: usize, t_max: usize) -> Vec<f32> {
    let u = t as f64 / t_max.max(1) as f64;
    (0..TIME_FEATURES / 2)
        .flat_map(|j| {
            let a = std::f64::consts::PI * 2f64.powi(j as i32) * u;
            [a.sin() as f32, a.cos() as f32]
        })
        .collect()
}

/// Network input and intermediates kept for the backward pass.
struct Cache {
    h: usize,
    w: usize,
    text: Option<Vec<f32>>,
    tf: Vec<f32>,
    tz: Vec<f32>,
    ta: Vec<f32>,
    x_in: Vec<f32>,
    col_in: Vec<f32>,
    z1a: Vec<f32>,
    a1a: Vec<f32>,
    col1b: Vec<f32>,
    z1b: Vec<f32>,
    p1: Vec<f32>,
    col2a: Vec<f32>,
    z2a: Vec<f32>,
    a2a: Vec<f32>,
    col2b: Vec<f32>,
    z2b: Vec<f32>,
    p2: Vec<f32>,
    col3a: Vec<f32>,
    z3a: Vec<f32>,
    a3a: Vec<f32>,
    col3b: Vec<f32>,
    z3b: Vec<f32>,
    h3: Vec<f32>,
    v2: Vec<f32>,
    a2: Vec<f32>,
    col_d2: Vec<f32>,
    zd2: Vec<f32>,
    d2: Vec<f32>,
    v1: Vec<f32>,
    a1: Vec<f32>,
    col_d1: Vec<f32>,
    zd1: Vec<f32>,
    d1: Vec<f32>,
    col_out: Vec<f32>,
}

/// Builds the 11-channel input. `residual` and `guide` are 3-channel planes;
/// `text` is `None` for unconditional calls.
fn forward(
    layout: &Layout,
    p: &[f32],
    residual: &[f32],
    guide: Option<&[f32]>,
    text: Option<&[f32]>,
    t: usize,
    t_max: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Cache) {
    let [c1, c2, _] = WIDTHS;
    let hw = h * w;
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

    let tf = time_features(t, t_max);
    let tz = conv(layout, p, T1, &tf, 1, 1).0;
    let ta = silu(&tz);
    let tb = conv(layout, p, T2, &ta, 1, 1).0;

    let mut x_in = vec![0.0; INPUT_CHANNELS * hw];
    x_in[..3 * hw].copy_from_slice(residual);
    if let Some(g) = guide {
        x_in[3 * hw..6 * hw].copy_from_slice(g);
        x_in[6 * hw..7 * hw].fill(1.0);
    }
    if let Some(e) = text {
        let proj = conv(layout, p, TXT, e, 1, 1).0;
        for (k, v) in proj.iter().enumerate() {
            x_in[(7 + k) * hw..(8 + k) * hw].fill(*v);
        }
    }

    let (mut z1a, col_in) = conv(layout, p, E1A, &x_in, h, w);
    add_channel_bias(&mut z1a, &tb[..c1], hw);
    let a1a = silu(&z1a);
    let (z1b, col1b) = conv(layout, p, E1B, &a1a, h, w);
    let h1 = silu(&z1b);
    let p1 = avgpool(&h1, c1, h, w);

    let (mut z2a, col2a) = conv(layout, p, E2A, &p1, h2, w2);
    add_channel_bias(&mut z2a, &tb[c1..c1 + c2], h2 * w2);
    let a2a = silu(&z2a);
    let (z2b, col2b) = conv(layout, p, E2B, &a2a, h2, w2);
    let h2v = silu(&z2b);
    let p2 = avgpool(&h2v, c2, h2, w2);

    let (mut z3a, col3a) = conv(layout, p, E3A, &p2, h4, w4);
    add_channel_bias(&mut z3a, &tb[c1 + c2..], h4 * w4);
    let a3a = silu(&z3a);
    let (z3b, col3b) = conv(layout, p, E3B, &a3a, h4, w4);
    let h3 = silu(&z3b);

    let u2 = conv(layout, p, U2, &h3, h4, w4).0;
    let mut v2 = upsample(&u2, c2, h4, w4, 1.0);
    add_into(&mut v2, &h2v);
    let a2 = silu(&v2);
    let (zd2, col_d2) = conv(layout, p, D2, &a2, h2, w2);
    let d2 = silu(&zd2);

    let u1 = conv(layout, p, U1, &d2, h2, w2).0;
    let mut v1 = upsample(&u1, c1, h2, w2, 1.0);
    add_into(&mut v1, &h1);
    let a1 = silu(&v1);
    let (zd1, col_d1) = conv(layout, p, D1, &a1, h, w);
    let d1 = silu(&zd1);
    let (out, col_out) = conv(layout, p, OUT, &d1, h, w);

    let cache = Cache {
        h,
        w,
        text: text.map(|e| e.to_vec()),
        tf,
        tz,
        ta,
        x_in,
        col_in,
        z1a,
        a1a,
        col1b,
        z1b,
        p1,
        col2a,
        z2a,
        a2a,
        col2b,
        z2b,
        p2,
        col3a,
        z3a,
        a3a,
        col3b,
        z3b,
        h3,
        v2,
        a2,
        col_d2,
        zd2,
        d2,
        v1,
        a1,
        col_d1,
        zd1,
        d1,
        col_out,
    };
    (out, cache)
}

/// Accumulates parameter gradients of `⟨dout, F⟩` into `g`.
fn backward(layout: &Layout, p: &[f32], g: &mut [f32], c: &Cache, dout: &[f32]) {
    let [c1, c2, _] = WIDTHS;
    let (h, w) = (c.h, c.w);
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    let up = |x: &[f32], ch, hh, ww| upsample(x, ch, hh, ww, 0.25);

    let mut dd1 = conv_back(layout, p, g, OUT, &c.d1, &c.col_out, dout, h, w, true).unwrap();
    silu_back(&mut dd1, &c.zd1);
    let mut dv1 = conv_back(layout, p, g, D1, &c.a1, &c.col_d1, &dd1, h, w, true).unwrap();
    silu_back(&mut dv1, &c.v1);
    let mut dh1 = dv1.clone();
    let du1 = sumpool(&dv1, c1, h, w);
    let mut dd2 = conv_back(layout, p, g, U1, &c.d2, &[], &du1, h2, w2, true).unwrap();

    silu_back(&mut dd2, &c.zd2);
    let mut dv2 = conv_back(layout, p, g, D2, &c.a2, &c.col_d2, &dd2, h2, w2, true).unwrap();
    silu_back(&mut dv2, &c.v2);
    let mut dh2 = dv2.clone();
    let du2 = sumpool(&dv2, c2, h2, w2);
    let mut dh3 = conv_back(layout, p, g, U2, &c.h3, &[], &du2, h4, w4, true).unwrap();

    let mut dtb = vec![0.0; TIME_BIAS];
    silu_back(&mut dh3, &c.z3b);
    let mut da3a = conv_back(layout, p, g, E3B, &c.a3a, &c.col3b, &dh3, h4, w4, true).unwrap();
    silu_back(&mut da3a, &c.z3a);
    dtb[c1 + c2..].copy_from_slice(&channel_sums(&da3a, h4 * w4));
    let dp2 = conv_back(layout, p, g, E3A, &c.p2, &c.col3a, &da3a, h4, w4, true).unwrap();
    add_into(&mut dh2, &up(&dp2, c2, h4, w4));

    silu_back(&mut dh2, &c.z2b);
    let mut da2a = conv_back(layout, p, g, E2B, &c.a2a, &c.col2b, &dh2, h2, w2, true).unwrap();
    silu_back(&mut da2a, &c.z2a);
    dtb[c1..c1 + c2].copy_from_slice(&channel_sums(&da2a, h2 * w2));
    let dp1 = conv_back(layout, p, g, E2A, &c.p1, &c.col2a, &da2a, h2, w2, true).unwrap();
    add_into(&mut dh1, &up(&dp1, c1, h2, w2));

    silu_back(&mut dh1, &c.z1b);
    let mut da1a = conv_back(layout, p, g, E1B, &c.a1a, &c.col1b, &dh1, h, w, true).unwrap();
    silu_back(&mut da1a, &c.z1a);
    dtb[..c1].copy_from_slice(&channel_sums(&da1a, h * w));
    let dx = conv_back(layout, p, g, E1A, &c.x_in, &c.col_in, &da1a, h, w, c.text.is_some());

    if let (Some(dx), Some(text)) = (dx, &c.text) {
        let dproj: Vec<f32> = (0..TEXT_CHANNELS).map(|k| dx[(7 + k) * h * w..(8 + k) * h * w].iter().sum()).collect();
        conv_back(layout, p, g, TXT, text, &[], &dproj, 1, 1, false);
    }
    let mut dta = conv_back(layout, p, g, T2, &c.ta, &[], &dtb, 1, 1, true).unwrap();
    silu_back(&mut dta, &c.tz);
    conv_back(layout, p, g, T1, &c.tf, &[], &dta, 1, 1, false);
}

/// Per-call preconditioning constants.
#[derive(Clone, Copy, Debug)]
struct Precond {
    sqrt_ab: f64,
    sqrt_1m_ab: f64,
    kappa: f64,
    c_out: f64,
    c_in: f64,
}

impl Precond {
    fn new(alpha_bar: f64, sigma_data: f64) -> Self {
        let sigma2 = (1.0 - alpha_bar) / alpha_bar;
        let s2 = sigma_data * sigma_data;
        Self {
            sqrt_ab: alpha_bar.sqrt(),
            sqrt_1m_ab: (1.0 - alpha_bar).sqrt(),
            kappa: s2 / (s2 + sigma2),
            c_out: sigma_data * sigma2.sqrt() / (s2 + sigma2).sqrt(),
            c_in: 1.0 / (s2 + sigma2).sqrt(),
        }
    }
}

/// The trained convolutional denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    text_dim: usize,
    layout: Layout,
    params: Vec<f32>,
}

impl ToyDenoiser {
    /// He-initialized weights; the output layer starts near zero so the
    /// untrained model predicts `x̂₀ ≈ base + κ·(y − base)`.
    pub fn new(text_dim: usize, seed: u64) -> Self {
        let layout = Layout::new(text_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; layout.total];
        for (l, s) in layout.specs.iter().enumerate() {
            let fan_in = (s.cin * s.k * s.k) as f64;
            let scale = if l == OUT { 0.1 } else { 1.0 } * (2.0 / fan_in).sqrt();
            let (w, _) = layout.wb_mut(&mut params, l);
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * scale) as f32;
            }
        }
        Self {
            text_dim,
            layout,
            params,
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Raw network output `F` for a 3-channel residual whose sides are
    /// multiples of 4.
    fn net(&self, residual: &[f32], guide: Option<&[f32]>, text: Option<&[f32]>, t: usize, t_max: usize, h: usize, w: usize) -> Vec<f32> {
        forward(&self.layout, &self.params, residual, guide, text, t, t_max, h, w).0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.params.len());
        out.extend_from_slice(&WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        for v in [self.text_dim, WIDTHS[0], WIDTHS[1], WIDTHS[2], self.params.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |m: &str| DiffusionError::Weights(m.to_string());
        if bytes.len() < 25 || bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad("missing SGDN header"));
        }
        if bytes[4] != WEIGHTS_VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let text_dim = u(0);
        if [u(1), u(2), u(3)] != WIDTHS {
            return Err(bad("channel widths differ from this build"));
        }
        let layout = Layout::new(text_dim);
        if u(4) != layout.total || bytes.len() != 25 + 4 * layout.total {
            return Err(bad("parameter count mismatch"));
        }
        let params: Vec<f32> = bytes[25..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            text_dim,
            layout,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DiffusionError::Weights(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let bytes = std::fs::read(path).map_err(|e| DiffusionError::Weights(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Edge-replicates a 3-channel f64 tensor to sides divisible by 4.
fn pad4(x: &ImageTensor) -> (Vec<f32>, usize, usize) {
    let (w, h) = (x.width, x.height);
    let (pw, ph) = (w.div_ceil(4) * 4, h.div_ceil(4) * 4);
    let mut out = vec![0.0f32; x.channels * pw * ph];
    for c in 0..x.channels {
        for y in 0..ph {
            for xx in 0..pw {
                out[c * pw * ph + y * pw + xx] = x.data[c * w * h + y.min(h - 1) * w + xx.min(w - 1)] as f32;
            }
        }
    }
    (out, pw, ph)
}

impl Denoiser for ToyDenoiser {
    fn predict(
        &self,
        x_t: &ImageTensor,
        t: usize,
        schedule: &NoiseSchedule,
        cond: Option<&Condition>,
    ) -> Result<ImageTensor, DiffusionError> {
        if x_t.channels != 3 || x_t.width == 0 || x_t.height == 0 {
            return Err(DiffusionError::Denoiser(format!("expected a 3-channel image, got {:?}", x_t.shape())));
        }
        if let Some(c) = cond {
            if !c.guide.same_shape(x_t) {
                return Err(DiffusionError::ShapeMismatch(c.guide.shape(), x_t.shape()));
            }
            if c.text.dim() != self.text_dim {
                return Err(DiffusionError::Denoiser(format!(
                    "text embedding has {} dims, model expects {}",
                    c.text.dim(),
                    self.text_dim
                )));
            }
        }
        let ab = schedule.alpha_bar(t)?;
        if t == 0 || ab >= 1.0 {
            return Ok(ImageTensor::zeros(3, x_t.width, x_t.height));
        }
        let sigma_data = if cond.is_some() { COND_SIGMA_DATA } else { UNCOND_SIGMA_DATA };
        let pc = Precond::new(ab, sigma_data);
        let base: Vec<f64> = match cond {
            Some(c) => c.guide.data.clone(),
            None => vec![0.5; x_t.len()],
        };
        let y_minus_base: Vec<f64> = x_t.data.iter().zip(&base).map(|(x, b)| x / pc.sqrt_ab - b).collect();
        let scaled = ImageTensor::from_vec(3, x_t.width, x_t.height, y_minus_base.iter().map(|v| v * pc.c_in).collect());
        let (res, pw, ph) = pad4(&scaled);
        let guide = cond.map(|c| {
            let g = ImageTensor::from_vec(3, x_t.width, x_t.height, c.guide.data.iter().map(|v| v - 0.5).collect());
            pad4(&g).0
        });
        let text: Option<Vec<f32>> = cond.map(|c| c.text.as_slice().iter().map(|&v| v as f32).collect());
        let f = self.net(&res, guide.as_deref(), text.as_deref(), t, schedule.t_max(), ph, pw);

        let (w, h) = (x_t.width, x_t.height);
        let mut eps = vec![0.0; x_t.len()];
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let i = c * w * h + y * w + xx;
                    let fv = f[c * pw * ph + y * pw + xx] as f64;
                    let x0 = base[i] + pc.kappa * y_minus_base[i] + pc.c_out * fv;
                    eps[i] = (x_t.data[i] - pc.sqrt_ab * x0) / pc.sqrt_1m_ab;
                }
            }
        }
        Ok(ImageTensor::from_vec(3, w, h, eps))
    }
}

/// One training image with its candidate guides and texts.
#[derive(Clone, Debug)]
pub struct DenoiserExample {
    pub image: ImageTensor,
    /// Degraded versions of `image` at the same size.
    pub guides: Vec<ImageTensor>,
    /// Overall and per-item text embeddings; one is drawn per case.
    pub texts: Vec<Embedding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserHyper {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Square crop side; must be a multiple of 4.
    pub crop: usize,
    /// Timesteps are drawn uniformly from `1..=t_train_max`.
    pub t_train_max: usize,
    pub cond_dropout: f64,
    /// Probability of blending the guide toward the clean image.
    pub blend_prob: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DenoiserHyper {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 8,
            learning_rate: 2e-3,
            crop: 32,
            t_train_max: 600,
            cond_dropout: 0.1,
            blend_prob: 0.3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainReport {
    /// Loss of the initial weights on a fixed held batch.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss per block of 100 iterations.
    pub curve: Vec<f64>,
}

/// A sampled training case in network units.
struct Case {
    residual: Vec<f32>,
    guide: Option<Vec<f32>>,
    text: Option<Vec<f32>>,
    t: usize,
    target: Vec<f32>,
}

fn crop3(x: &ImageTensor, x0: usize, y0: usize, side: usize, flip: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            for xx in 0..side {
                let sx = if flip { x0 + side - 1 - xx } else { x0 + xx };
                out.push(x.data[c * x.width * x.height + (y0 + y) * x.width + sx]);
            }
        }
    }
    out
}

fn draw_case(
    examples: &[DenoiserExample],
    schedule: &NoiseSchedule,
    hyper: &DenoiserHyper,
    rng: &mut ChaCha8Rng,
) -> Result<Case, DiffusionError> {
    let ex = &examples[rng.random_range(0..examples.len())];
    let side = hyper.crop;
    let x0 = rng.random_range(0..=ex.image.width - side);
    let y0 = rng.random_range(0..=ex.image.height - side);
    let flip = rng.random_bool(0.5);
    let clean = crop3(&ex.image, x0, y0, side, flip);
    let uncond = rng.random_bool(hyper.cond_dropout);
    let mut guide = crop3(&ex.guides[rng.random_range(0..ex.guides.len())], x0, y0, side, flip);
    if rng.random_bool(hyper.blend_prob) {
        let a: f64 = rng.random_range(0.0..1.0);
        guide.iter_mut().zip(&clean).for_each(|(g, c)| *g = a * *c + (1.0 - a) * *g);
    }
    let t = rng.random_range(1..=hyper.t_train_max.min(schedule.t_max()));
    let ab = schedule.alpha_bar(t)?;
    let pc = Precond::new(ab, if uncond { UNCOND_SIGMA_DATA } else { COND_SIGMA_DATA });
    let mut residual = Vec::with_capacity(clean.len());
    let mut target = Vec::with_capacity(clean.len());
    for (i, &c) in clean.iter().enumerate() {
        let base = if uncond { 0.5 } else { guide[i] };
        let eps: f64 = StandardNormal.sample(rng);
        let xt = pc.sqrt_ab * c + pc.sqrt_1m_ab * eps;
        let ymb = xt / pc.sqrt_ab - base;
        residual.push((ymb * pc.c_in) as f32);
        target.push(((c - base - pc.kappa * ymb) / pc.c_out) as f32);
    }
    Ok(Case {
        residual,
        guide: (!uncond).then(|| guide.iter().map(|v| (v - 0.5) as f32).collect()),
        text: (!uncond).then(|| {
            ex.texts[rng.random_range(0..ex.texts.len())].as_slice().iter().map(|&v| v as f32).collect()
        }),
        t,
        target,
    })
}

/// Mean squared `F` error over a batch; accumulates gradients when `grads`
/// is given.
fn batch_loss(model: &ToyDenoiser, cases: &[Case], t_max: usize, side: usize, mut grads: Option<&mut [f32]>) -> f64 {
    let n = (cases.len() * 3 * side * side) as f64;
    let mut total = 0.0;
    for case in cases {
        let (out, cache) = forward(
            &model.layout,
            &model.params,
            &case.residual,
            case.guide.as_deref(),
            case.text.as_deref(),
            case.t,
            t_max,
            side,
            side,
        );
        let mut dout = Vec::with_capacity(out.len());
        for (o, y) in out.iter().zip(&case.target) {
            let d = (o - y) as f64;
            total += d * d;
            dout.push((2.0 * d / n) as f32);
        }
        if let Some(g) = grads.as_deref_mut() {
            backward(&model.layout, &model.params, g, &cache, &dout);
        }
    }
    total / n
}

/// Adam on the `F`-space squared error, which is the ε-prediction error
/// reweighted by `(s² + σ²)/s²`.
pub fn train_toy_denoiser(
    examples: &[DenoiserExample],
    schedule: &NoiseSchedule,
    hyper: &DenoiserHyper,
) -> Result<(ToyDenoiser, DenoiserTrainReport), DiffusionError> {
    if examples.len() < MIN_TRAIN_IMAGES {
        return Err(DiffusionError::DatasetTooSmall(examples.len(), MIN_TRAIN_IMAGES));
    }
    if hyper.crop == 0 || hyper.crop % 4 != 0 {
        return Err(DiffusionError::Denoiser(format!("crop {} is not a positive multiple of 4", hyper.crop)));
    }
    let text_dim = examples[0].texts.first().map_or(0, |e| e.dim());
    for ex in examples {
        let (_, w, h) = ex.image.shape();
        if ex.image.channels != 3 || w < hyper.crop || h < hyper.crop {
            return Err(DiffusionError::Denoiser(format!("training image {:?} smaller than the crop", ex.image.shape())));
        }
        if ex.guides.is_empty() || ex.guides.iter().any(|g| !g.same_shape(&ex.image)) {
            return Err(DiffusionError::Denoiser("every image needs same-shape guides".into()));
        }
        if ex.texts.is_empty() || ex.texts.iter().any(|e| e.dim() != text_dim) {
            return Err(DiffusionError::Denoiser("every image needs texts of one dimension".into()));
        }
    }

    let mut model = ToyDenoiser::new(text_dim, hyper.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let t_max = schedule.t_max();
    let held = (0..32)
        .map(|_| draw_case(examples, schedule, hyper, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let initial_loss = batch_loss(&model, &held, t_max, hyper.crop, None);

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m = vec![0.0f32; model.params.len()];
    let mut v = vec![0.0f32; model.params.len()];
    let mut grads = vec![0.0f32; model.params.len()];
    let mut curve = Vec::new();
    let mut block = 0.0;
    for it in 1..=hyper.iterations {
        let cases = (0..hyper.batch_size.max(1))
            .map(|_| draw_case(examples, schedule, hyper, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        grads.fill(0.0);
        let loss = batch_loss(&model, &cases, t_max, hyper.crop, Some(&mut grads));
        if !loss.is_finite() {
            return Err(DiffusionError::Denoiser(format!("non-finite loss at iteration {it}")));
        }
        block += loss;
        if it % 100 == 0 {
            curve.push(block / 100.0);
            block = 0.0;
        }
        let norm = grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        let clip = if norm > hyper.grad_clip { hyper.grad_clip / norm } else { 1.0 };
        let lr = hyper.learning_rate * (1.0 - b2.powi(it as i32)).sqrt() / (1.0 - b1.powi(it as i32));
        for ((p, g), (mi, vi)) in model.params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = *g as f64 * clip;
            *mi = (b1 * *mi as f64 + (1.0 - b1) * g) as f32;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * g * g) as f32;
            *p -= (lr * *mi as f64 / ((*vi as f64).sqrt() + eps)) as f32;
        }
    }
    let final_loss = batch_loss(&model, &held, t_max, hyper.crop, None);
    Ok((
        model,
        DenoiserTrainReport {
            initial_loss,
            final_loss,
            curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, BETA_MAX, BETA_MIN, DEFAULT_T};
    use crate::embedding::{Embedder, ToyEmbedder};

    fn schedule() -> NoiseSchedule {
        make_schedule(DEFAULT_T, BETA_MIN, BETA_MAX).unwrap()
    }

    fn examples(n: usize) -> Vec<DenoiserExample> {
        let emb = ToyEmbedder;
        (0..n)
            .map(|i| {
                let a = (i % 7) as f64 / 7.0;
                let img = ImageTensor::from_vec(
                    3,
                    16,
                    16,
                    (0..768).map(|k| if (k % 16) < 8 { a } else { 1.0 - a * ((k / 256) as f64 / 3.0) }).collect(),
                );
                let guide = ImageTensor::from_vec(3, 16, 16, img.data.iter().map(|v| 0.7 * v + 0.15).collect());
                DenoiserExample {
                    image: img,
                    guides: vec![guide],
                    texts: vec![emb.embed_text(if i % 2 == 0 { "a red square" } else { "blue sky" }).unwrap()],
                }
            })
            .collect()
    }

    fn hyper(iterations: usize) -> DenoiserHyper {
        DenoiserHyper {
            iterations,
            batch_size: 4,
            crop: 8,
            ..DenoiserHyper::default()
        }
    }

    #[test]
    fn parameter_budget() {
        let n = ToyDenoiser::new(64, 0).parameter_count();
        assert!((60_000..=120_000).contains(&n), "{n}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = schedule();
        let ex = examples(MIN_TRAIN_IMAGES);
        let h = hyper(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases: Vec<Case> = (0..3).map(|_| draw_case(&ex, &s, &h, &mut rng).unwrap()).collect();
        let mut model = ToyDenoiser::new(64, 1);
        // a non-trivial output layer so every path carries gradient
        for v in model.params.iter_mut() {
            *v *= 1.5;
        }
        let mut g = vec![0.0f32; model.params.len()];
        batch_loss(&model, &cases, 1000, 8, Some(&mut g));
        let raw: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let step = 5e-3f32;
        let shifted = |sign: f32| {
            let mut m = model.clone();
            m.params.iter_mut().zip(&dir).for_each(|(p, d)| *p += sign * step * d);
            batch_loss(&m, &cases, 1000, 8, None)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step as f64);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-2, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let s = schedule();
        let ex = examples(MIN_TRAIN_IMAGES);
        let (a, ra) = train_toy_denoiser(&ex, &s, &hyper(60)).unwrap();
        assert!(ra.final_loss < ra.initial_loss, "{ra:?}");
        let (b, rb) = train_toy_denoiser(&ex, &s, &hyper(60)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn too_few_images() {
        let s = schedule();
        let err = train_toy_denoiser(&examples(10), &s, &hyper(1)).unwrap_err();
        assert_eq!(err, DiffusionError::DatasetTooSmall(10, MIN_TRAIN_IMAGES));
    }

    #[test]
    fn conditional_differs_from_unconditional() {
        let s = schedule();
        let model = ToyDenoiser::new(64, 3);
        let ex = &examples(1)[0];
        let x = super::super::q_sample(&ex.image, 300, &super::super::gaussian_noise(3, 16, 16, 1), &s).unwrap();
        let cond = Condition {
            guide: &ex.guides[0],
            text: &ex.texts[0],
        };
        let u = model.predict(&x, 300, &s, None).unwrap();
        let c = model.predict(&x, 300, &s, Some(&cond)).unwrap();
        assert!(u.data.iter().zip(&c.data).any(|(a, b)| (a - b).abs() > 1e-6));
        assert_eq!(c, model.predict(&x, 300, &s, Some(&cond)).unwrap());
    }

    #[test]
    fn odd_sizes_and_weights_round_trip() {
        let s = schedule();
        let model = ToyDenoiser::new(64, 4);
        let x = super::super::gaussian_noise(3, 13, 10, 2);
        let e = model.predict(&x, 500, &s, None).unwrap();
        assert_eq!(e.shape(), (3, 13, 10));
        assert!(e.data.iter().all(|v| v.is_finite()));
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"SGDN");
        assert_eq!(ToyDenoiser::from_bytes(&bytes).unwrap(), model);
        assert!(ToyDenoiser::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
