//! Text formats for semantic maps (`SMAP1`) and scalar grids (`PGRID1`).
//!
//! ```text
//! SMAP1                 PGRID1
//! <height> <width>      <height> <width>
//! <m_per_px>            <row 0: width floats>
//! <class_count>         ...
//! <row 0: width ints>
//! ...
//! ```
//! UTF-8, LF line endings, `255` marks void cells. Floats are written in the
//! shortest form that parses back to the identical `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::{ScalarGrid, SemanticMap, NUM_CLASSES};
use crate::error::{Error, Result};

fn data_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
        }
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::Data(format!("unexpected end of file, expected {what}")))
    }
}

fn parse_dims(lines: &mut Lines<'_>) -> Result<(usize, usize)> {
    let (ln, line) = lines.next_line("dimensions")?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(data_err(ln, format!("expected `<height> <width>`, got `{line}`")));
    }
    let h: usize = parts[0].parse().map_err(|_| data_err(ln, "bad height"))?;
    let w: usize = parts[1].parse().map_err(|_| data_err(ln, "bad width"))?;
    if h == 0 || w == 0 {
        return Err(data_err(ln, "dimensions must be positive"));
    }
    Ok((h, w))
}

fn expect_magic(lines: &mut Lines<'_>, magic: &str) -> Result<()> {
    let (ln, line) = lines.next_line(magic)?;
    if line != magic {
        return Err(data_err(ln, format!("expected `{magic}` header, got `{line}`")));
    }
    Ok(())
}

fn parse_rows<V: std::str::FromStr>(
    lines: &mut Lines<'_>,
    h: usize,
    w: usize,
) -> Result<Vec<V>> {
    let mut out = Vec::with_capacity(h * w);
    for _ in 0..h {
        let (ln, line) = lines.next_line("grid row")?;
        let before = out.len();
        for tok in line.split_whitespace() {
            out.push(
                tok.parse()
                    .map_err(|_| data_err(ln, format!("invalid value `{tok}`")))?,
            );
        }
        if out.len() - before != w {
            return Err(data_err(
                ln,
                format!("expected {w} values, found {}", out.len() - before),
            ));
        }
    }
    Ok(out)
}

pub fn parse_smap(text: &str) -> Result<SemanticMap> {
    let mut lines = Lines::new(text);
    expect_magic(&mut lines, "SMAP1")?;
    let (h, w) = parse_dims(&mut lines)?;
    let (ln, line) = lines.next_line("resolution")?;
    let resolution: f64 = line
        .parse()
        .map_err(|_| data_err(ln, format!("invalid resolution `{line}`")))?;
    let (ln, line) = lines.next_line("class count")?;
    let classes: usize = line
        .parse()
        .map_err(|_| data_err(ln, format!("invalid class count `{line}`")))?;
    if classes != NUM_CLASSES {
        return Err(data_err(ln, format!("expected {NUM_CLASSES} classes, got {classes}")));
    }
    let cells = parse_rows::<u8>(&mut lines, h, w)?;
    SemanticMap::new(h, w, resolution, cells)
}

pub fn smap_to_string(map: &SemanticMap) -> String {
    let mut s = String::with_capacity(map.height() * map.width() * 3 + 32);
    let _ = writeln!(s, "SMAP1");
    let _ = writeln!(s, "{} {}", map.height(), map.width());
    let _ = writeln!(s, "{:?}", map.resolution());
    let _ = writeln!(s, "{NUM_CLASSES}");
    for row in map.cells().chunks(map.width()) {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_pgrid(text: &str) -> Result<ScalarGrid> {
    let mut lines = Lines::new(text);
    expect_magic(&mut lines, "PGRID1")?;
    let (h, w) = parse_dims(&mut lines)?;
    let data = parse_rows::<f64>(&mut lines, h, w)?;
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite grid value {v}")));
    }
    ScalarGrid::new(h, w, data)
}

pub fn pgrid_to_string(grid: &ScalarGrid) -> String {
    let mut s = String::with_capacity(grid.height() * grid.width() * 12 + 32);
    let _ = writeln!(s, "PGRID1");
    let _ = writeln!(s, "{} {}", grid.height(), grid.width());
    for row in grid.data().chunks(grid.width()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_smap(path: impl AsRef<Path>) -> Result<SemanticMap> {
    let path = path.as_ref();
    parse_smap(&read_text(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_smap(path: impl AsRef<Path>, map: &SemanticMap) -> Result<()> {
    write_text(path.as_ref(), &smap_to_string(map))
}

pub fn read_pgrid(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    let path = path.as_ref();
    parse_pgrid(&read_text(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_pgrid(path: impl AsRef<Path>, grid: &ScalarGrid) -> Result<()> {
    write_text(path.as_ref(), &pgrid_to_string(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgrid::VOID;
    use proptest::prelude::*;

    #[test]
    fn smap_round_trip() {
        let map = SemanticMap::new(2, 3, 0.4, vec![0, 1, VOID, 12, 5, 3]).unwrap();
        let text = smap_to_string(&map);
        assert_eq!(text, "SMAP1\n2 3\n0.4\n13\n0 1 255\n12 5 3\n");
        assert_eq!(parse_smap(&text).unwrap(), map);
    }

    #[test]
    fn smap_errors_carry_line_numbers() {
        let err = parse_smap("SMAP1\n2 2\n0.4\n13\n0 1\n0 x\n").unwrap_err();
        assert!(err.to_string().contains("line 6"), "{err}");
        let err = parse_smap("SMAP1\n2 2\n0.4\n13\n0 1\n").unwrap_err();
        assert!(err.to_string().contains("end of file"), "{err}");
        assert!(parse_smap("SMAP2\n").is_err());
        assert!(parse_smap("SMAP1\n1 1\n0.4\n9\n0\n").is_err());
    }

    #[test]
    fn pgrid_rejects_short_rows() {
        let err = parse_pgrid("PGRID1\n1 3\n0.1 0.2\n").unwrap_err();
        assert!(err.to_string().contains("expected 3 values"), "{err}");
    }

    proptest! {
        #[test]
        fn pgrid_round_trip_is_bit_exact(
            h in 1usize..5,
            w in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 25),
            tiny in 1e-300f64..1e-250,
        ) {
            let mut data: Vec<f64> = seed[..h * w].to_vec();
            data[0] = tiny;
            let grid = ScalarGrid::new(h, w, data).unwrap();
            let back = parse_pgrid(&pgrid_to_string(&grid)).unwrap();
            for (a, b) in grid.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
