//! Minimal ASCII PLY support: one `vertex` element with `x y z` doubles and
//! optionally an `int label` or `uchar red green blue`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point;

/// 17 significant digits, enough to round-trip any double exactly.
pub fn fmt_coord(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn render_ply(points: &[Point], labels: Option<&[i32]>, colors: Option<&[[u8; 3]]>) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if labels.is_some() {
        s.push_str("property int label\n");
    }
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", fmt_coord(p[0]), fmt_coord(p[1]), fmt_coord(p[2]));
        if let Some(l) = labels {
            let _ = write!(s, " {}", l[i]);
        }
        if let Some(c) = colors {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, points: &[Point], labels: Option<&[i32]>, colors: Option<&[[u8; 3]]>) -> Result<()> {
    fs::write(path, render_ply(points, labels, colors)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyVertices {
    pub points: Vec<Point>,
    pub labels: Option<Vec<i32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Prop {
    X,
    Y,
    Z,
    Label,
    Other,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PlyVertices> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic line"));
    }
    if lines.next().map(str::trim) != Some("format ascii 1.0") {
        return Err(bad("only `format ascii 1.0` is supported"));
    }
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("header ends before `end_header`"))?.trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| bad("vertex count is not an integer"))?);
            }
            ["element", ..] => return Err(bad("only a single vertex element is supported")),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(bad("property before element declaration"));
                }
                let p = match (*ty, *name) {
                    ("double" | "float" | "float64" | "float32", "x") => Prop::X,
                    ("double" | "float" | "float64" | "float32", "y") => Prop::Y,
                    ("double" | "float" | "float64" | "float32", "z") => Prop::Z,
                    ("int" | "int32", "label") => Prop::Label,
                    (_, "x" | "y" | "z" | "label") => return Err(bad(&format!("unsupported type `{ty}` for `{name}`"))),
                    _ => Prop::Other,
                };
                props.push(p);
            }
            _ => return Err(bad(&format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let pos = |p: Prop| props.iter().position(|&q| q == p);
    let (Some(ix), Some(iy), Some(iz)) = (pos(Prop::X), pos(Prop::Y), pos(Prop::Z)) else {
        return Err(bad("vertex element lacks x, y or z"));
    };
    let il = pos(Prop::Label);
    let mut points = Vec::with_capacity(count);
    let mut labels = il.map(|_| Vec::with_capacity(count));
    for row in 0..count {
        let line = lines.next().ok_or_else(|| bad(&format!("expected {count} vertices, found {row}")))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != props.len() {
            return Err(bad(&format!("vertex {row} has {} values, expected {}", tokens.len(), props.len())));
        }
        let num = |i: usize| -> Result<f64> {
            tokens[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("vertex {row}: `{}` is not a number", tokens[i])))
        };
        points.push([num(ix)?, num(iy)?, num(iz)?]);
        if let (Some(i), Some(ls)) = (il, labels.as_mut()) {
            ls.push(tokens[i].parse().map_err(|_| bad(&format!("vertex {row}: bad label")))?);
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing data after the declared vertices"));
    }
    Ok(PlyVertices { points, labels })
}

pub fn read_ply(path: &Path) -> Result<PlyVertices> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}
