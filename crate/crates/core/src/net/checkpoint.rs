//! Versioned text checkpoints for networks and optimizer state.
//!
//! Weights are written as hexadecimal IEEE-754 bit patterns, one line per
//! row, so a round trip is bit-exact. The header records the scalar type and
//! loading with a different instantiation is an error.

use std::path::Path;

use crate::linalg::Matrix;
use crate::net::{Activation, ConvGeom, Layer, LayerBuf, LayerKind, Network, SgdState};
use crate::{Error, Result, Scalar};

const MAGIC: &str = "growbench-net v1";

/// Serialize a network (and optionally its momentum state) to text.
pub fn write_network<T: Scalar>(net: &Network<T>, opt: Option<&SgdState<T>>) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("scalar {}\n", T::TAG));
    out.push_str(&format!("layers {}\n", net.layers.len()));
    for layer in &net.layers {
        let kind = match &layer.kind {
            LayerKind::Dense => "dense".to_string(),
            LayerKind::Conv2d(g) => format!(
                "conv geom {} {} {} {} {} {} {} {}",
                g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.in_h, g.in_w, g.stride,
                g.pad
            ),
            LayerKind::BatchNorm { eps } => format!("batchnorm eps {:016x}", eps.to_bits_u64()),
        };
        out.push_str(&format!(
            "layer {} act {} passthrough {} rows {} cols {} {}\n",
            kind_tag(&layer.kind),
            layer.activation.name(),
            layer.passthrough,
            layer.weights.rows(),
            layer.weights.cols(),
            kind_extra(&kind),
        ));
        for r in 0..layer.weights.rows() {
            out.push_str("w");
            for &v in layer.weights.row(r) {
                out.push_str(&format!(" {:016x}", v.to_bits_u64()));
            }
            out.push('\n');
        }
        if let Some(bias) = &layer.bias {
            out.push_str("bias");
            for &v in bias {
                out.push_str(&format!(" {:016x}", v.to_bits_u64()));
            }
            out.push('\n');
        }
    }
    match opt {
        None => out.push_str("opt none\n"),
        Some(state) => {
            out.push_str("opt sgd\n");
            for buf in &state.velocity {
                for r in 0..buf.weights.rows() {
                    out.push_str("v");
                    for &v in buf.weights.row(r) {
                        out.push_str(&format!(" {:016x}", v.to_bits_u64()));
                    }
                    out.push('\n');
                }
                if let Some(bias) = &buf.bias {
                    out.push_str("vbias");
                    for &v in bias {
                        out.push_str(&format!(" {:016x}", v.to_bits_u64()));
                    }
                    out.push('\n');
                }
            }
        }
    }
    out.push_str("end\n");
    out
}

fn kind_tag<T>(kind: &LayerKind<T>) -> &'static str {
    match kind {
        LayerKind::Dense => "dense",
        LayerKind::Conv2d(_) => "conv",
        LayerKind::BatchNorm { .. } => "batchnorm",
    }
}

fn kind_extra(kind_line: &str) -> &str {
    match kind_line.split_once(' ') {
        Some((_, rest)) => rest,
        None => "",
    }
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Parse("unexpected end of checkpoint".into()))
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse(format!("line {line}: {}", msg.into()))
}

fn parse_bits<T: Scalar>(line: usize, tok: &str) -> Result<T> {
    u64::from_str_radix(tok, 16)
        .map(T::from_bits_u64)
        .map_err(|_| parse_err(line, format!("bad hex value '{tok}'")))
}

fn parse_usize(line: usize, tok: Option<&str>, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(line, format!("expected {what}")))
}

fn parse_value_row<T: Scalar>(
    line: usize,
    content: &str,
    tag: &str,
    expect: usize,
) -> Result<Vec<T>> {
    let mut toks = content.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(parse_err(line, format!("expected '{tag}' row")));
    }
    let vals: Vec<T> = toks
        .map(|t| parse_bits(line, t))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(parse_err(
            line,
            format!("expected {expect} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Parse a checkpoint produced by [`write_network`].
pub fn read_network<T: Scalar>(text: &str) -> Result<(Network<T>, Option<SgdState<T>>)> {
    let mut r = LineReader::new(text);
    let (ln, magic) = r.next()?;
    if magic != MAGIC {
        return Err(parse_err(ln, format!("bad header '{magic}'")));
    }
    let (ln, scalar) = r.next()?;
    let tag = scalar
        .strip_prefix("scalar ")
        .ok_or_else(|| parse_err(ln, "expected scalar tag"))?;
    if tag != T::TAG {
        return Err(parse_err(
            ln,
            format!("checkpoint is {tag} but this build expects {}", T::TAG),
        ));
    }
    let (ln, count) = r.next()?;
    let count = count
        .strip_prefix("layers ")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| parse_err(ln, "expected layer count"))?;

    let mut layers: Vec<Layer<T>> = Vec::with_capacity(count);
    let mut lookahead: Option<(usize, &str)> = None;
    for _ in 0..count {
        let (ln, header) = match lookahead.take() {
            Some(x) => x,
            None => r.next()?,
        };
        let (mut layer, rows, cols) = parse_layer_header::<T>(ln, header)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = r.next()?;
            data.extend(parse_value_row::<T>(ln, row, "w", cols)?);
        }
        layer.weights = Matrix::new(rows, cols, data)
            .map_err(|e| Error::Parse(format!("invalid weights: {e}")))?;
        let (ln_next, next) = r.next()?;
        if next.starts_with("bias") {
            let want = match &layer.kind {
                LayerKind::Conv2d(g) => g.out_channels,
                _ => rows,
            };
            layer.bias = Some(parse_value_row::<T>(ln_next, next, "bias", want)?);
        } else {
            lookahead = Some((ln_next, next));
        }
        layers.push(layer);
    }

    let (ln, opt_line) = match lookahead.take() {
        Some(x) => x,
        None => r.next()?,
    };
    let mut rest: Vec<(usize, &str)> = Vec::new();
    while let Ok((ln2, l)) = r.next() {
        rest.push((ln2, l));
        if l == "end" {
            break;
        }
    }
    let mut it = rest.into_iter();
    let opt = parse_opt_section::<T>(&layers, opt_line, ln, &mut it)?;
    expect_end(&mut it)?;
    let net = Network::new(layers).map_err(|e| Error::Parse(format!("invalid network: {e}")))?;
    if let Some(state) = &opt {
        if !state.matches(&net) {
            return Err(Error::Parse("optimizer state does not match network".into()));
        }
    }
    Ok((net, opt))
}

fn parse_layer_header<T: Scalar>(ln: usize, header: &str) -> Result<(Layer<T>, usize, usize)> {
    let mut toks = header.split_whitespace();
    if toks.next() != Some("layer") {
        return Err(parse_err(ln, "expected 'layer'"));
    }
    let kind_tok = toks
        .next()
        .ok_or_else(|| parse_err(ln, "expected layer kind"))?;
    let mut act = Activation::Identity;
    let mut passthrough = 0usize;
    let mut rows = None;
    let mut cols = None;
    let mut geom_vals: Option<Vec<usize>> = None;
    let mut eps: Option<T> = None;
    while let Some(key) = toks.next() {
        match key {
            "act" => {
                let v = toks.next().ok_or_else(|| parse_err(ln, "missing act"))?;
                act = Activation::parse(v).map_err(|_| parse_err(ln, "bad activation"))?;
            }
            "passthrough" => passthrough = parse_usize(ln, toks.next(), "passthrough")?,
            "rows" => rows = Some(parse_usize(ln, toks.next(), "rows")?),
            "cols" => cols = Some(parse_usize(ln, toks.next(), "cols")?),
            "geom" => {
                geom_vals = Some(
                    (0..8)
                        .map(|_| parse_usize(ln, toks.next(), "geometry field"))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            "eps" => {
                let v = toks.next().ok_or_else(|| parse_err(ln, "missing eps"))?;
                eps = Some(parse_bits(ln, v)?);
            }
            other => return Err(parse_err(ln, format!("unknown field '{other}'"))),
        }
    }
    let rows = rows.ok_or_else(|| parse_err(ln, "missing rows"))?;
    let cols = cols.ok_or_else(|| parse_err(ln, "missing cols"))?;
    let kind = match kind_tok {
        "dense" => LayerKind::Dense,
        "conv" => {
            let g = geom_vals.ok_or_else(|| parse_err(ln, "conv layer without geometry"))?;
            LayerKind::Conv2d(ConvGeom {
                in_channels: g[0],
                out_channels: g[1],
                kernel_h: g[2],
                kernel_w: g[3],
                in_h: g[4],
                in_w: g[5],
                stride: g[6],
                pad: g[7],
            })
        }
        "batchnorm" => LayerKind::BatchNorm {
            eps: eps.ok_or_else(|| parse_err(ln, "batchnorm layer without eps"))?,
        },
        other => return Err(parse_err(ln, format!("unknown layer kind '{other}'"))),
    };
    Ok((
        Layer {
            kind,
            weights: Matrix::zeros(0, 0),
            bias: None,
            activation: act,
            passthrough,
        },
        rows,
        cols,
    ))
}

fn parse_opt_section<'a, T: Scalar>(
    layers: &[Layer<T>],
    opt_line: &str,
    ln: usize,
    it: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<Option<SgdState<T>>> {
    match opt_line {
        "opt none" => Ok(None),
        "opt sgd" => {
            let mut velocity = Vec::with_capacity(layers.len());
            for layer in layers {
                let (rows, cols) = layer.weights.shape();
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (ln, row) = it
                        .next()
                        .ok_or_else(|| Error::Parse("truncated optimizer state".into()))?;
                    data.extend(parse_value_row::<T>(ln, row, "v", cols)?);
                }
                let weights = Matrix::new(rows, cols, data)
                    .map_err(|e| Error::Parse(format!("invalid velocity: {e}")))?;
                let bias = if let Some(b) = &layer.bias {
                    let (ln, row) = it
                        .next()
                        .ok_or_else(|| Error::Parse("truncated optimizer state".into()))?;
                    Some(parse_value_row::<T>(ln, row, "vbias", b.len())?)
                } else {
                    None
                };
                velocity.push(LayerBuf { weights, bias });
            }
            Ok(Some(SgdState { velocity }))
        }
        other => Err(parse_err(ln, format!("unknown opt section '{other}'"))),
    }
}

fn expect_end<'a>(it: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<()> {
    match it.next() {
        Some((_, "end")) => Ok(()),
        Some((ln, other)) => Err(parse_err(ln, format!("expected 'end', got '{other}'"))),
        None => Err(Error::Parse("missing 'end'".into())),
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &Network<T>,
    opt: Option<&SgdState<T>>,
) -> Result<()> {
    std::fs::write(path, write_network(net, opt))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, Option<SgdState<T>>)> {
    let text = std::fs::read_to_string(path)?;
    read_network(&text)
}
