//! OFF / OBJ reading and writing. Only the ASCII, triangle-only subset is
//! supported.

use std::fmt::Write as _;
use std::path::Path;

use super::{Face, Mesh, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Off,
    Obj,
}

fn format_of(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("off") => Ok(Format::Off),
        Some("obj") => Ok(Format::Obj),
        _ => Err(Error::Validation(format!(
            "unsupported mesh extension for {} (expected .off or .obj)",
            path.display()
        ))),
    }
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mesh = match format_of(path)? {
        Format::Off => parse_off(&text)?,
        Format::Obj => parse_obj(&text)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let text = match format_of(path)? {
        Format::Off => write_off(mesh),
        Format::Obj => write_obj(mesh),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Nine significant digits.
fn fmt_coord(x: f64) -> String {
    format!("{x:.8e}")
}

fn write_off(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str("OFF\n");
    let _ = writeln!(s, "{} {} 0", mesh.num_vertices(), mesh.num_faces());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", fmt_coord(p[0]), fmt_coord(p[1]), fmt_coord(p[2]));
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    for p in mesh.vertices() {
        let _ = writeln!(s, "v {} {} {}", fmt_coord(p[0]), fmt_coord(p[1]), fmt_coord(p[2]));
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

fn fmt_err(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| fmt_err(line, format!("cannot parse `{tok}` as a number")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| fmt_err(line, format!("cannot parse `{tok}` as an index")))
}

/// Content lines with 1-based line numbers; comments and blanks removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = content_lines(text);
    let (ln, header) = lines.next().ok_or_else(|| fmt_err(1, "empty file"))?;
    let mut header_toks = header.split_whitespace();
    if header_toks.next() != Some("OFF") {
        return Err(fmt_err(ln, format!("expected `OFF` header, found `{header}`")));
    }
    let rest: Vec<&str> = header_toks.collect();
    let (ln, counts): (usize, Vec<&str>) = if rest.is_empty() {
        let (ln, l) = lines.next().ok_or_else(|| fmt_err(ln + 1, "missing counts line"))?;
        (ln, l.split_whitespace().collect())
    } else if rest[0].eq_ignore_ascii_case("binary") {
        return Err(fmt_err(ln, "binary OFF is not supported"));
    } else {
        (ln, rest)
    };
    if counts.len() < 2 {
        return Err(fmt_err(ln, "counts line needs at least `N F`"));
    }
    let nv = parse_usize(counts[0], ln)?;
    let nf = parse_usize(counts[1], ln)?;

    let mut vertices: Vec<Vec3> = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| fmt_err(0, format!("file ends after {} of {nv} vertices", vertices.len())))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() < 3 {
            return Err(fmt_err(ln, "vertex line needs three coordinates"));
        }
        vertices.push([parse_f64(t[0], ln)?, parse_f64(t[1], ln)?, parse_f64(t[2], ln)?]);
    }
    let mut faces: Vec<Face> = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| fmt_err(0, format!("file ends after {} of {nf} faces", faces.len())))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.first().copied() != Some("3") {
            return Err(fmt_err(ln, "only triangular faces (`3 i j k`) are supported"));
        }
        if t.len() < 4 {
            return Err(fmt_err(ln, "face line needs three indices"));
        }
        faces.push([parse_usize(t[1], ln)?, parse_usize(t[2], ln)?, parse_usize(t[3], ln)?]);
    }
    Ok(Mesh::new_unchecked(vertices, faces))
}

fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<Face> = Vec::new();
    for (ln, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        match t.next() {
            Some("v") => {
                let c: Vec<&str> = t.collect();
                if c.len() < 3 {
                    return Err(fmt_err(ln, "vertex line needs three coordinates"));
                }
                vertices.push([parse_f64(c[0], ln)?, parse_f64(c[1], ln)?, parse_f64(c[2], ln)?]);
            }
            Some("f") => {
                let c: Vec<&str> = t.collect();
                if c.len() != 3 {
                    return Err(fmt_err(ln, "only triangular faces are supported"));
                }
                let mut f = [0usize; 3];
                for (k, tok) in c.iter().enumerate() {
                    let first = tok.split('/').next().unwrap_or("");
                    let idx: i64 = first
                        .parse()
                        .map_err(|_| fmt_err(ln, format!("cannot parse `{tok}` as an index")))?;
                    if idx < 1 {
                        return Err(Error::Validation(format!(
                            "line {ln}: OBJ face index {idx} is invalid (indices are 1-based)"
                        )));
                    }
                    f[k] = idx as usize - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok(Mesh::new_unchecked(vertices, faces))
}
