//! ASCII PLY for point clouds with an optional per-vertex confidence.
//!
//! Coordinates are written as `double` using the shortest representation
//! that parses back to the same value, so a write/read cycle is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::se3::{DenseCloud, Vec3};

pub fn to_ply_string(cloud: &DenseCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.points.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.confidence.is_some() {
        out.push_str("property double confidence\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        if let Some(c) = &cloud.confidence {
            let _ = write!(out, " {}", c[i]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_ply(text: &str) -> Result<DenseCloud> {
    let bad = |d: String| Error::format("PLY", d);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| bad("missing end_header".into()))?
            .trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| bad(format!("bad count {n}")))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(bad(format!("unsupported property type {ty}")));
                }
                props.push(name.to_string());
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let idx = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex needs x, y, z".into())),
    };
    let ic = idx("confidence");
    let mut points = Vec::with_capacity(count);
    let mut conf = Vec::with_capacity(if ic.is_some() { count } else { 0 });
    for k in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing vertex {k}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|_| bad(format!("bad number '{w}'")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(bad(format!("vertex {k} has {} values", vals.len())));
        }
        points.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
        if let Some(i) = ic {
            conf.push(vals[i]);
        }
    }
    if ic.is_some() {
        DenseCloud::with_confidence(points, conf)
    } else {
        DenseCloud::new(points)
    }
}

pub fn write_ply(path: &Path, cloud: &DenseCloud) -> Result<()> {
    std::fs::write(path, to_ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<DenseCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cloud = DenseCloud::with_confidence(
            vec![
                Vec3::new(0.1, -2.0 / 3.0, 1e-17),
                Vec3::new(1e300, 5.0, -0.0),
            ],
            vec![1.5, 0.1 + 0.2],
        )
        .unwrap();
        assert_eq!(parse_ply(&to_ply_string(&cloud)).unwrap(), cloud);
    }

    #[test]
    fn reads_float_without_confidence() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        let cloud = parse_ply(text).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(1.0, 2.0, 3.0)]);
        assert!(cloud.confidence.is_none());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }
}
