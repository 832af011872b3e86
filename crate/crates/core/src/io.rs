//! File formats: point-occupancy datasets, occupancy grids, slice images
//! and loss histories.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::document::format_real;
use crate::error::{Error, Result};
use crate::primitives::Point;
use crate::target::BoundingBox;
use crate::tree::CsgTree;

/// Points with target occupancies. Text form: a `dim=<d>,count=<n>` header
/// line followed by `n` rows of `d` coordinates and one occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSampleDataset {
    pub dim: usize,
    pub points: Vec<Point>,
    pub occupancy: Vec<f64>,
}

fn header_field(field: Option<&str>, key: &str, path: &str) -> Result<usize> {
    field
        .and_then(|f| f.trim().strip_prefix(key))
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| {
            Error::parse(
                format!("{path}:1"),
                format!("expected '{key}=<integer>' in header"),
            )
        })
}

impl PointSampleDataset {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = reader.records();
        let header = records
            .next()
            .ok_or_else(|| Error::parse(path, "empty dataset"))?
            .map_err(|e| Error::parse(format!("{path}:1"), e.to_string()))?;
        let dim = header_field(header.get(0), "dim", path)?;
        let count = header_field(header.get(1), "count", path)?;
        if dim != 2 && dim != 3 {
            return Err(Error::parse(
                format!("{path}:1"),
                format!("dimension must be 2 or 3, got {dim}"),
            ));
        }
        let mut points = Vec::with_capacity(count);
        let mut occupancy = Vec::with_capacity(count);
        for (row, record) in records.enumerate() {
            let line = format!("{path}:{}", row + 2);
            let record = record.map_err(|e| Error::parse(&line, e.to_string()))?;
            if record.len() != dim + 1 {
                return Err(Error::parse(
                    &line,
                    format!("expected {} fields, found {}", dim + 1, record.len()),
                ));
            }
            let values: Vec<f64> = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::parse(&line, format!("'{f}': {e}")))
                })
                .collect::<Result<_>>()?;
            let occ = values[dim];
            if !(0.0..=1.0).contains(&occ) {
                return Err(Error::parse(
                    &line,
                    format!("occupancy {occ} outside [0, 1]"),
                ));
            }
            let p = Point::new(&values[..dim]).map_err(|e| Error::parse(&line, e.to_string()))?;
            points.push(p);
            occupancy.push(occ);
        }
        if points.len() != count {
            return Err(Error::parse(
                path,
                format!("header declares {count} rows, found {}", points.len()),
            ));
        }
        Ok(PointSampleDataset {
            dim,
            points,
            occupancy,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={},count={}\n", self.dim, self.points.len());
        for (p, o) in self.points.iter().zip(&self.occupancy) {
            let mut fields: Vec<String> = p.coords().iter().map(|&v| format_real(v)).collect();
            fields.push(format_real(*o));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Samples `tree` at `points`.
    pub fn from_tree(tree: &CsgTree, points: Vec<Point>) -> Result<Self> {
        let occupancy = tree.eval(&points)?;
        Ok(PointSampleDataset {
            dim: tree.dim(),
            points,
            occupancy,
        })
    }
}

const GRID_MAGIC: &str = "fuzzycsg-grid 1";

/// Occupancy at cell centres of a regular grid over a box. `values` are
/// ordered with the x index varying fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: Vec<usize>,
    pub bbox: BoundingBox,
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn cell_centers(dims: &[usize], bbox: &BoundingBox) -> Vec<Point> {
        let axis = |k: usize, i: usize| {
            bbox.min[k] + (i as f64 + 0.5) * (bbox.max[k] - bbox.min[k]) / dims[k] as f64
        };
        let mut out = Vec::with_capacity(dims.iter().product());
        match dims.len() {
            2 => {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        out.push(Point::xy(axis(0, i), axis(1, j)));
                    }
                }
            }
            _ => {
                for l in 0..dims[2] {
                    for j in 0..dims[1] {
                        for i in 0..dims[0] {
                            out.push(Point::xyz(axis(0, i), axis(1, j), axis(2, l)));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn sample(tree: &CsgTree, dims: &[usize], bbox: &BoundingBox) -> Result<Self> {
        if dims.len() != tree.dim() || bbox.dim() != tree.dim() {
            return Err(Error::Shape(format!(
                "{}D grid over a {}D box for a {}D tree",
                dims.len(),
                bbox.dim(),
                tree.dim()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Argument("grid resolution must be positive".into()));
        }
        let values = tree.eval(&Self::cell_centers(dims, bbox))?;
        Ok(OccupancyGrid {
            dims: dims.to_vec(),
            bbox: bbox.clone(),
            values,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|&x| format_real(x))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(
            w,
            "{GRID_MAGIC}\ndims {}\nmin {}\nmax {}\ndata\n",
            dims.join(" "),
            join(&self.bbox.min),
            join(&self.bbox.max)
        )?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R, path: &str) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = |n: usize| -> Result<String> {
            let mut s = String::new();
            r.read_line(&mut s)?;
            if !s.ends_with('\n') {
                return Err(Error::parse(format!("{path}:{n}"), "truncated header"));
            }
            Ok(s.trim_end().to_string())
        };
        if line(1)? != GRID_MAGIC {
            return Err(Error::parse(
                format!("{path}:1"),
                format!("expected '{GRID_MAGIC}'"),
            ));
        }
        let list = |s: String, key: &str, n: usize| -> Result<Vec<String>> {
            let rest = s
                .strip_prefix(key)
                .ok_or_else(|| Error::parse(format!("{path}:{n}"), format!("expected '{key}'")))?;
            Ok(rest.split_whitespace().map(str::to_string).collect())
        };
        let bad =
            |n: usize, what: &str| Error::parse(format!("{path}:{n}"), format!("malformed {what}"));
        let dims: Vec<usize> = list(line(2)?, "dims", 2)?
            .iter()
            .map(|v| v.parse().map_err(|_| bad(2, "dims")))
            .collect::<Result<_>>()?;
        let min: Vec<f64> = list(line(3)?, "min", 3)?
            .iter()
            .map(|v| v.parse().map_err(|_| bad(3, "min")))
            .collect::<Result<_>>()?;
        let max: Vec<f64> = list(line(4)?, "max", 4)?
            .iter()
            .map(|v| v.parse().map_err(|_| bad(4, "max")))
            .collect::<Result<_>>()?;
        if line(5)? != "data" {
            return Err(bad(5, "data marker"));
        }
        let bbox = BoundingBox::new(min, max).map_err(|e| Error::parse(path, e.to_string()))?;
        if dims.len() != bbox.dim() {
            return Err(Error::parse(path, "grid and box dimensions differ"));
        }
        let count: usize = dims.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::parse(
                path,
                format!("expected {count} values, found {} bytes", bytes.len()),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(OccupancyGrid { dims, bbox, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(file, &path.display().to_string())
    }
}

/// Which slice of the domain an image shows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlicePlane {
    /// The whole 2D domain.
    Full,
    /// The 3D plane where coordinate `axis` equals `offset`.
    Axis { axis: usize, offset: f64 },
}

/// 8-bit grayscale image, rows from top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Gray value drawn on the 0.5 isoline.
pub const ISOLINE_GRAY: u8 = 128;

pub fn occupancy_to_pixel(o: f64) -> u8 {
    (255.0 * o.clamp(0.0, 1.0)).round() as u8
}

/// Renders occupancy over a slice of `bbox` at `resolution × resolution`
/// pixel centres. Image rows run from the top of the slice's second axis
/// to the bottom.
pub fn render_slice(
    tree: &CsgTree,
    bbox: &BoundingBox,
    plane: SlicePlane,
    resolution: usize,
    isoline: bool,
) -> Result<SliceImage> {
    if resolution < 2 {
        return Err(Error::Argument(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    if bbox.dim() != tree.dim() {
        return Err(Error::Shape(
            "bounding box and tree dimensions differ".into(),
        ));
    }
    let (u_axis, v_axis, fixed) = match (tree.dim(), plane) {
        (2, SlicePlane::Full) => (0, 1, None),
        (3, SlicePlane::Axis { axis, offset }) => {
            if axis > 2 {
                return Err(Error::Argument(format!(
                    "slice axis {axis} is not 0, 1 or 2"
                )));
            }
            if !(bbox.min[axis]..=bbox.max[axis]).contains(&offset) {
                return Err(Error::Argument(format!(
                    "slice offset {offset} lies outside the box [{}, {}] on axis {axis}",
                    bbox.min[axis], bbox.max[axis]
                )));
            }
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            (u, v, Some((axis, offset)))
        }
        (2, _) => {
            return Err(Error::Argument(
                "2D trees render the full domain only".into(),
            ))
        }
        _ => {
            return Err(Error::Argument(
                "3D trees need an axis-aligned slice plane".into(),
            ))
        }
    };
    let n = resolution;
    let coord = |k: usize, i: usize| {
        bbox.min[k] + (i as f64 + 0.5) * (bbox.max[k] - bbox.min[k]) / n as f64
    };
    let mut points = Vec::with_capacity(n * n);
    for row in 0..n {
        let v = coord(v_axis, n - 1 - row);
        for col in 0..n {
            let mut c = [0.0; 3];
            c[u_axis] = coord(u_axis, col);
            c[v_axis] = v;
            if let Some((axis, offset)) = fixed {
                c[axis] = offset;
            }
            points.push(Point::new(&c[..tree.dim()])?);
        }
    }
    let occ = tree.eval(&points)?;
    let mut pixels: Vec<u8> = occ.iter().map(|&o| occupancy_to_pixel(o)).collect();
    if isoline {
        let inside: Vec<bool> = occ.iter().map(|&o| o >= 0.5).collect();
        for row in 0..n {
            for col in 0..n {
                let i = row * n + col;
                let right = col + 1 < n && inside[i] != inside[i + 1];
                let down = row + 1 < n && inside[i] != inside[i + n];
                if right || down {
                    pixels[i] = ISOLINE_GRAY;
                }
            }
        }
    }
    Ok(SliceImage {
        width: n,
        height: n,
        pixels,
    })
}

impl SliceImage {
    /// Binary portable graymap (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("pgm", m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?,
            );
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes
            .get(pos + 1..)
            .ok_or_else(|| bad("missing raster"))?
            .to_vec();
        if pixels.len() != width * height {
            return Err(bad("raster size does not match header"));
        }
        Ok(SliceImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// `iteration,loss` rows, one per entry.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_real(*l)));
    }
    out
}

/// `x,y[,z],occupancy[,target]` rows for evaluated points.
pub fn occupancy_csv(points: &[Point], occupancy: &[f64], target: Option<&[f64]>) -> String {
    let dim = points.first().map_or(2, Point::dim);
    let names = ["x", "y", "z"];
    let mut out = names[..dim].join(",");
    out.push_str(",occupancy");
    if target.is_some() {
        out.push_str(",target");
    }
    out.push('\n');
    for (i, (p, o)) in points.iter().zip(occupancy).enumerate() {
        let mut fields: Vec<String> = p.coords().iter().map(|&v| format_real(v)).collect();
        fields.push(format_real(*o));
        if let Some(t) = target {
            fields.push(format_real(t[i]));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
