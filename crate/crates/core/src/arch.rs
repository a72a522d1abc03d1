//! Compact architecture notation.
//!
//! Tokens:
//!
//! * `c7s1-k`: 7x7 stride-1 convolution, InstanceNorm, ReLU, reflection padding.
//!   When it is the last of several tokens it is the output head instead: no
//!   normalization, `tanh` for image heads, linear after patch layers.
//! * `dk`: 3x3 stride-2 convolution, InstanceNorm, ReLU.
//! * `Rk`: residual block of two 3x3 convolutions with `k` filters each.
//!   `Rk×n` (or `Rkxn`) repeats the block `n` times.
//! * `uk`: 3x3 stride-1/2 (transposed) convolution, InstanceNorm, ReLU.
//! * `Ck`: 4x4 stride-2 convolution, InstanceNorm, LeakyReLU(0.2). The first
//!   `Ck` of a graph has no normalization and the last of a run of several
//!   has stride 1, which gives the 70x70 patch discriminator.
//!
//! Tokens are separated by `,`, `-` or whitespace.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GLOBAL_GENERATOR: &str =
    "c7s1-64,d128,d256,d512,d1024,R1024,R1024,R1024,R1024,R1024,R1024,R1024,R1024,R1024,u512,u256,u128,u64,c7s1-3";
pub const LOCAL_ENHANCER: &str = "c7s1-32,d64,R64,R64,R64,u32,c7s1-3";
/// Index of the enhancer layer whose output receives the global generator's last feature map.
pub const LOCAL_ENHANCER_FUSION: usize = 1;
pub const DISCRIMINATOR: &str = "C64-C128-C256-C512";
pub const DISCRIMINATOR_HEAD: &str = "c4s1-1";
pub const ENCODER: &str = "c7s1-16,d32,d64,u32,u16,c7s1-3";

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("empty architecture string")]
    Empty,
    #[error("unknown token `{token}` at position {position} (byte {offset})")]
    UnknownToken { token: String, position: usize, offset: usize },
    #[error("malformed count in token `{token}` at position {position} (byte {offset})")]
    MalformedCount { token: String, position: usize, offset: usize },
    #[error("layer {layer} ({token}): {reason}")]
    Shape { layer: usize, token: String, reason: String },
    #[error("fusion point {index} is out of range for {layers} layers")]
    FusionOutOfRange { index: usize, layers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DownConv,
    ResidualBlock,
    UpConv,
    PatchConv,
    FinalConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stride {
    One,
    Two,
    Half,
}

impl Stride {
    /// `(numerator, denominator)` of the stride.
    pub fn ratio(self) -> (usize, usize) {
        match self {
            Stride::One => (1, 1),
            Stride::Two => (2, 1),
            Stride::Half => (1, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: Stride,
    pub norm: Norm,
    pub activation: Activation,
    pub padding: Padding,
}

impl LayerSpec {
    fn conv(filters: usize, kernel: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            filters,
            kernel,
            stride: Stride::One,
            norm: Norm::Instance,
            activation: Activation::Relu,
            padding: Padding::Reflect,
        }
    }

    fn down(filters: usize) -> Self {
        Self {
            kind: LayerKind::DownConv,
            filters,
            kernel: 3,
            stride: Stride::Two,
            norm: Norm::Instance,
            activation: Activation::Relu,
            padding: Padding::Zero,
        }
    }

    fn residual(filters: usize) -> Self {
        Self {
            kind: LayerKind::ResidualBlock,
            filters,
            kernel: 3,
            stride: Stride::One,
            norm: Norm::Instance,
            activation: Activation::Relu,
            padding: Padding::Reflect,
        }
    }

    fn up(filters: usize) -> Self {
        Self {
            kind: LayerKind::UpConv,
            filters,
            kernel: 3,
            stride: Stride::Half,
            norm: Norm::Instance,
            activation: Activation::Relu,
            padding: Padding::Zero,
        }
    }

    fn patch(filters: usize) -> Self {
        Self {
            kind: LayerKind::PatchConv,
            filters,
            kernel: 4,
            stride: Stride::Two,
            norm: Norm::Instance,
            activation: Activation::LeakyRelu,
            padding: Padding::Zero,
        }
    }

    /// Spatial padding applied on each side before the convolution.
    pub fn pad(&self) -> usize {
        match self.kind {
            LayerKind::UpConv => 1,
            LayerKind::PatchConv => 2,
            LayerKind::FinalConv | LayerKind::Conv if self.padding == Padding::Zero => 2,
            _ => self.kernel / 2,
        }
    }

    /// Weights plus biases, given the number of input planes.
    pub fn param_count(&self, input_planes: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        match self.kind {
            LayerKind::ResidualBlock => 2 * (k2 * self.filters * self.filters + self.filters),
            _ => k2 * input_planes * self.filters + self.filters,
        }
    }

    fn token(&self, is_last: bool) -> String {
        match self.kind {
            LayerKind::Conv | LayerKind::FinalConv => {
                let _ = is_last;
                let s = self.stride.ratio().0;
                format!("c{}s{}-{}", self.kernel, s, self.filters)
            }
            LayerKind::DownConv => format!("d{}", self.filters),
            LayerKind::ResidualBlock => format!("R{}", self.filters),
            LayerKind::UpConv => format!("u{}", self.filters),
            LayerKind::PatchConv => format!("C{}", self.filters),
        }
    }
}

/// Spatial shape after one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layers: Vec<LayerSpec>,
    /// Layer after whose output an external feature map is added.
    pub fusion_point: Option<usize>,
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn number(&mut self) -> Option<usize> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.src[start..self.pos].parse().ok()
    }

    fn at_separator(&self) -> bool {
        self.peek().is_none_or(|c| c == ',' || c == '-' || c.is_whitespace())
    }
}

/// Parse a comma/dash separated architecture string.
pub fn parse_arch(spec: &str) -> Result<LayerGraph, ArchError> {
    let mut sc = Scanner { src: spec, pos: 0 };
    let mut layers = Vec::new();
    let mut position = 0;
    loop {
        while sc.peek().is_some_and(|c| c == ',' || c == '-' || c.is_whitespace()) {
            sc.bump();
        }
        if sc.peek().is_none() {
            break;
        }
        let offset = sc.pos;
        let token_text = |sc: &Scanner<'_>| {
            let rest = &spec[offset..];
            let end = rest
                .find(|c: char| c == ',' || c.is_whitespace())
                .unwrap_or(rest.len())
                .max(sc.pos - offset);
            rest[..end].to_string()
        };
        let malformed = |sc: &Scanner<'_>| ArchError::MalformedCount { token: token_text(sc), position, offset };
        let lead = sc.bump().expect("non-empty");
        match lead {
            'c' => {
                let kernel = sc.number().ok_or_else(|| malformed(&sc))?;
                if sc.bump() != Some('s') {
                    return Err(malformed(&sc));
                }
                let stride = sc.number().ok_or_else(|| malformed(&sc))?;
                if sc.bump() != Some('-') {
                    return Err(malformed(&sc));
                }
                let filters = sc.number().ok_or_else(|| malformed(&sc))?;
                if kernel == 0 || stride != 1 || filters == 0 || !sc.at_separator() {
                    return Err(malformed(&sc));
                }
                layers.push(LayerSpec::conv(filters, kernel));
            }
            'd' | 'R' | 'u' | 'C' => {
                let filters = sc.number().filter(|&f| f > 0).ok_or_else(|| malformed(&sc))?;
                let mut repeat = 1;
                if lead == 'R' && sc.peek().is_some_and(|c| c == 'x' || c == '×') {
                    sc.bump();
                    repeat = sc.number().filter(|&n| n > 0).ok_or_else(|| malformed(&sc))?;
                }
                if !sc.at_separator() {
                    return Err(malformed(&sc));
                }
                let layer = match lead {
                    'd' => LayerSpec::down(filters),
                    'R' => LayerSpec::residual(filters),
                    'u' => LayerSpec::up(filters),
                    _ => LayerSpec::patch(filters),
                };
                layers.extend(std::iter::repeat_n(layer, repeat));
            }
            _ => {
                while !sc.at_separator() {
                    sc.bump();
                }
                return Err(ArchError::UnknownToken { token: spec[offset..sc.pos].to_string(), position, offset });
            }
        }
        position += 1;
    }
    if layers.is_empty() {
        return Err(ArchError::Empty);
    }
    finalize(&mut layers);
    Ok(LayerGraph { layers, fusion_point: None })
}

fn finalize(layers: &mut [LayerSpec]) {
    let n = layers.len();
    let patch_idx: Vec<usize> = (0..n).filter(|&i| layers[i].kind == LayerKind::PatchConv).collect();
    if let Some(&first) = patch_idx.first() {
        layers[first].norm = Norm::None;
    }
    if patch_idx.len() >= 2 {
        layers[*patch_idx.last().expect("non-empty")].stride = Stride::One;
    }
    if n >= 2 && layers[n - 1].kind == LayerKind::Conv {
        let after_patch = layers[n - 2].kind == LayerKind::PatchConv;
        let head = &mut layers[n - 1];
        head.kind = LayerKind::FinalConv;
        head.norm = Norm::None;
        if after_patch {
            head.activation = Activation::None;
            head.padding = Padding::Zero;
        } else {
            head.activation = Activation::Tanh;
        }
    }
}

impl fmt::Display for LayerGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                let sep = if l.kind == LayerKind::PatchConv && self.layers[i - 1].kind == LayerKind::PatchConv {
                    "-"
                } else {
                    ","
                };
                f.write_str(sep)?;
            }
            f.write_str(&l.token(i + 1 == n))?;
        }
        Ok(())
    }
}

impl LayerGraph {
    pub fn with_fusion_point(mut self, index: usize) -> Result<Self, ArchError> {
        if index >= self.layers.len() {
            return Err(ArchError::FusionOutOfRange { index, layers: self.layers.len() });
        }
        self.fusion_point = Some(index);
        Ok(self)
    }

    /// Append another graph's layers (e.g. a discriminator head).
    pub fn followed_by(&self, tail: &LayerGraph) -> LayerGraph {
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().copied());
        let mut out = LayerGraph { layers, fusion_point: self.fusion_point };
        // a lone `c4s1-1` tail parses as a plain conv; re-derive the head
        let n = out.layers.len();
        if n >= 2 && out.layers[n - 1].kind == LayerKind::Conv {
            finalize(&mut out.layers);
        }
        out
    }

    /// Divide every filter count except the output head by `divisor` (minimum 1).
    pub fn scaled(&self, divisor: usize) -> LayerGraph {
        let divisor = divisor.max(1);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut l = *l;
                if l.kind != LayerKind::FinalConv {
                    l.filters = (l.filters / divisor).max(1);
                }
                l
            })
            .collect();
        LayerGraph { layers, fusion_point: self.fusion_point }
    }

    pub fn output_planes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.filters)
    }

    /// Planes produced by layer `index`.
    pub fn planes_after(&self, index: usize) -> usize {
        self.layers[index].filters
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn param_count(&self, input_planes: usize) -> usize {
        let mut planes = input_planes;
        let mut total = 0;
        for l in &self.layers {
            total += l.param_count(planes);
            planes = l.filters;
        }
        total
    }

    /// Per-layer output shapes for an input of `planes x height x width`.
    pub fn infer_shapes(&self, height: usize, width: usize, planes: usize) -> Result<Vec<LayerShape>, ArchError> {
        let mut cur = LayerShape { planes, height, width };
        let mut out = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let err = |reason: String| ArchError::Shape { layer: i, token: l.token(i + 1 == n), reason };
            let conv_len = |len: usize, stride: usize| -> Result<usize, ArchError> {
                let padded = len + 2 * l.pad();
                if padded < l.kernel {
                    return Err(err(format!("input extent {len} is smaller than the kernel")));
                }
                Ok((padded - l.kernel) / stride + 1)
            };
            cur = match l.kind {
                LayerKind::DownConv => {
                    if !cur.height.is_multiple_of(2) || !cur.width.is_multiple_of(2) {
                        return Err(err(format!("{}x{} is not divisible by 2", cur.height, cur.width)));
                    }
                    LayerShape { planes: l.filters, height: cur.height / 2, width: cur.width / 2 }
                }
                LayerKind::UpConv => LayerShape { planes: l.filters, height: cur.height * 2, width: cur.width * 2 },
                LayerKind::ResidualBlock => {
                    if cur.planes != l.filters {
                        return Err(err(format!("residual block over {} planes receives {}", l.filters, cur.planes)));
                    }
                    cur
                }
                LayerKind::Conv | LayerKind::FinalConv | LayerKind::PatchConv => {
                    let s = l.stride.ratio().0;
                    LayerShape { planes: l.filters, height: conv_len(cur.height, s)?, width: conv_len(cur.width, s)? }
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Side of the input window that influences one output unit.
    pub fn receptive_field(&self) -> usize {
        self.extend_field(1.0, 1.0).0.ceil() as usize
    }

    /// Grow a field of `field` input pixels whose output grid steps by `jump`
    /// input pixels through every layer.
    pub fn extend_field(&self, mut field: f64, mut jump: f64) -> (f64, f64) {
        for l in &self.layers {
            let k = l.kernel as f64;
            match l.kind {
                LayerKind::ResidualBlock => field += 2.0 * (k - 1.0) * jump,
                LayerKind::UpConv => {
                    // each output reads ceil(k/2) inputs of the coarser grid
                    field += ((l.kernel as f64 / 2.0).ceil() - 1.0) * jump;
                    jump /= 2.0;
                }
                _ => {
                    field += (k - 1.0) * jump;
                    jump *= l.stride.ratio().0 as f64;
                }
            }
        }
        (field, jump)
    }

    /// Layers `range` as a graph of their own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LayerGraph {
        LayerGraph { layers: self.layers[range].to_vec(), fusion_point: None }
    }

    /// Input interval `[start, end]` (may extend past the borders) seen by
    /// output index `o` along one axis. Only defined for graphs without
    /// residual blocks or fractional strides.
    pub fn receptive_window(&self, o: usize) -> Option<(isize, isize)> {
        let mut jump = 1isize;
        let mut start = 0isize;
        for l in &self.layers {
            match l.kind {
                LayerKind::ResidualBlock | LayerKind::UpConv => return None,
                _ => {
                    start -= l.pad() as isize * jump;
                    jump *= l.stride.ratio().0 as isize;
                }
            }
        }
        let first = o as isize * jump + start;
        Some((first, first + self.receptive_field() as isize - 1))
    }

    /// Shape table: one line per layer plus the receptive field.
    pub fn shape_table(&self, height: usize, width: usize, planes: usize) -> Result<String, ArchError> {
        let shapes = self.infer_shapes(height, width, planes)?;
        let mut s = format!("{:<4} {:<10} {:<16} {:>12} {:>10}\n", "#", "token", "kind", "out (CxHxW)", "params");
        s.push_str(&format!("{:<4} {:<10} {:<16} {:>12}\n", "-", "input", "", format!("{planes}x{height}x{width}")));
        let mut inp = planes;
        let n = self.layers.len();
        for (i, (l, sh)) in self.layers.iter().zip(&shapes).enumerate() {
            s.push_str(&format!(
                "{:<4} {:<10} {:<16} {:>12} {:>10}\n",
                i,
                l.token(i + 1 == n),
                format!("{:?}", l.kind),
                format!("{}x{}x{}", sh.planes, sh.height, sh.width),
                l.param_count(inp)
            ));
            inp = l.filters;
        }
        s.push_str(&format!("parameters: {}\n", self.param_count(planes)));
        s.push_str(&format!("receptive field: {}\n", self.receptive_field()));
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_token() {
        let g = parse_arch("c7s1-64").unwrap();
        assert_eq!(g.layers.len(), 1);
        let l = g.layers[0];
        assert_eq!((l.kind, l.kernel, l.stride, l.filters), (LayerKind::Conv, 7, Stride::One, 64));
        assert_eq!(l.padding, Padding::Reflect);
        assert_eq!(l.norm, Norm::Instance);
        assert_eq!(l.param_count(3), 9472);
    }

    #[test]
    fn global_generator_layout() {
        let g = parse_arch(GLOBAL_GENERATOR).unwrap();
        assert_eq!(g.count(LayerKind::ResidualBlock), 9);
        assert_eq!(g.count(LayerKind::DownConv), 4);
        assert_eq!(g.count(LayerKind::UpConv), 4);
        let res: Vec<_> = g.layers.iter().map(|l| l.kind).collect();
        assert_eq!(res[5], LayerKind::ResidualBlock);
        assert_eq!(res[13], LayerKind::ResidualBlock);
        assert_eq!(res[14], LayerKind::UpConv);
        let head = g.layers.last().unwrap();
        assert_eq!((head.kind, head.activation, head.norm), (LayerKind::FinalConv, Activation::Tanh, Norm::None));
        let shapes = g.infer_shapes(256, 128, 5).unwrap();
        assert_eq!(*shapes.last().unwrap(), LayerShape { planes: 3, height: 256, width: 128 });
    }

    #[test]
    fn enhancer_shapes() {
        let g = parse_arch(LOCAL_ENHANCER).unwrap();
        assert_eq!(g.count(LayerKind::ResidualBlock), 3);
        let shapes = g.infer_shapes(512, 256, 5).unwrap();
        assert_eq!(*shapes.last().unwrap(), LayerShape { planes: 3, height: 512, width: 256 });
        assert_eq!(shapes[LOCAL_ENHANCER_FUSION].planes, 64);
    }

    #[test]
    fn discriminator_patch_is_seventy() {
        let d = parse_arch(DISCRIMINATOR).unwrap().followed_by(&parse_arch(DISCRIMINATOR_HEAD).unwrap());
        assert_eq!(d.layers[0].norm, Norm::None);
        assert!(d.layers[1..4].iter().all(|l| l.norm == Norm::Instance));
        assert_eq!(d.layers[3].stride, Stride::One);
        let head = d.layers[4];
        assert_eq!((head.kind, head.activation, head.filters), (LayerKind::FinalConv, Activation::None, 1));
        assert_eq!(d.receptive_field(), 70);
        let shapes = d.infer_shapes(70, 70, 8).unwrap();
        let out = shapes.last().unwrap();
        assert!(out.height >= 1 && out.width >= 1 && out.planes == 1);
    }

    #[test]
    fn textbook_receptive_fields() {
        let single = LayerGraph { layers: vec![LayerSpec::patch(8)], fusion_point: None };
        assert_eq!(single.receptive_field(), 4);
        let two = LayerGraph { layers: vec![LayerSpec::conv(4, 3), LayerSpec::conv(4, 3)], fusion_point: None };
        assert_eq!(two.receptive_field(), 5);
    }

    #[test]
    fn print_round_trips() {
        for s in [GLOBAL_GENERATOR, LOCAL_ENHANCER, DISCRIMINATOR, ENCODER, "c7s1-64"] {
            assert_eq!(parse_arch(s).unwrap().to_string(), s);
        }
        let d = parse_arch(DISCRIMINATOR).unwrap().followed_by(&parse_arch(DISCRIMINATOR_HEAD).unwrap());
        assert_eq!(parse_arch(&d.to_string()).unwrap(), d);
    }

    #[test]
    fn repeat_shorthand() {
        let a = parse_arch("d8,R8×3,u4").unwrap();
        let b = parse_arch("d8,R8x3,u4").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(LayerKind::ResidualBlock), 3);
    }

    #[test]
    fn parse_errors_carry_position() {
        assert_eq!(parse_arch(""), Err(ArchError::Empty));
        assert_eq!(parse_arch(" , "), Err(ArchError::Empty));
        match parse_arch("c7s1-64,q12,d8") {
            Err(ArchError::UnknownToken { token, position, offset }) => {
                assert_eq!((token.as_str(), position, offset), ("q12", 1, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_arch("c7s1-64,dX") {
            Err(ArchError::MalformedCount { position, .. }) => assert_eq!(position, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_arch("d0"), Err(ArchError::MalformedCount { .. })));
        assert!(matches!(parse_arch("c7s1-"), Err(ArchError::MalformedCount { .. })));
        assert!(matches!(parse_arch("R8x"), Err(ArchError::MalformedCount { .. })));
    }

    #[test]
    fn indivisible_input_names_layer() {
        let g = parse_arch(GLOBAL_GENERATOR).unwrap();
        match g.infer_shapes(72, 64, 5) {
            Err(ArchError::Shape { layer, token, .. }) => {
                // 72 -> 36 -> 18 -> 9, the fourth down conv fails
                assert_eq!(layer, 4);
                assert_eq!(token, "d1024");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn doubling_input_doubles_every_layer() {
        let g = parse_arch(GLOBAL_GENERATOR).unwrap().scaled(8);
        let a = g.infer_shapes(64, 32, 5).unwrap();
        let b = g.infer_shapes(128, 64, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((2 * x.height, 2 * x.width, x.planes), (y.height, y.width, y.planes));
        }
    }

    #[test]
    fn scaling_keeps_heads() {
        let g = parse_arch(GLOBAL_GENERATOR).unwrap().scaled(4);
        assert_eq!(g.layers[0].filters, 16);
        assert_eq!(g.output_planes(), 3);
        assert_eq!(g.to_string().split(',').next(), Some("c7s1-16"));
    }
}
