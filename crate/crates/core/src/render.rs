//! Decision-region rasters and representation scatters as PGM/PPM images.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::Classify;
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            xmin: -5.0,
            xmax: 5.0,
            ymin: -5.0,
            ymax: 5.0,
        }
    }
}

pub const DEFAULT_RESOLUTION: usize = 256;

/// Predicted classes over a square lattice of cell centres.
///
/// Row 0 is the top of the image (largest y); column 0 is the smallest x.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGrid {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub cells: Vec<usize>,
    pub bounds: Bounds,
}

impl ClassGrid {
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.cells[row * self.width + col]
    }

    /// Centre of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        cell_center(&self.bounds, self.width, self.height, row, col)
    }

    /// Gray level of class `k`: `floor(255·k/(K−1))`.
    pub fn gray(&self, k: usize) -> u8 {
        gray_level(k, self.num_classes)
    }

    /// Fraction of cells on which two same-shaped grids differ.
    pub fn disagreement(&self, other: &ClassGrid) -> f64 {
        let diff = self.cells.iter().zip(&other.cells).filter(|(a, b)| a != b).count();
        diff as f64 / self.cells.len() as f64
    }

    /// CSV `x,y,class` over cell centres, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,class\n");
        for r in 0..self.height {
            for c in 0..self.width {
                let (x, y) = self.cell_center(r, c);
                let _ = writeln!(out, "{x},{y},{}", self.get(r, c));
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        if self.num_classes > 256 {
            return Err(Error::Domain("PGM holds at most 256 classes".into()));
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|&k| self.gray(k)));
        Ok(out)
    }

    /// Rebuilds a grid from gray levels written by [`ClassGrid::to_pgm`].
    pub fn from_gray(image: &GrayImage, num_classes: usize, bounds: Bounds) -> Result<Self> {
        let lookup: Vec<u8> = (0..num_classes).map(|k| gray_level(k, num_classes)).collect();
        let cells = image
            .pixels
            .iter()
            .map(|g| {
                lookup
                    .iter()
                    .position(|l| l == g)
                    .ok_or_else(|| Error::Domain(format!("gray level {g} is not a class")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width: image.width,
            height: image.height,
            num_classes,
            cells,
            bounds,
        })
    }
}

fn gray_level(k: usize, num_classes: usize) -> u8 {
    if num_classes <= 1 {
        0
    } else {
        (255 * k / (num_classes - 1)) as u8
    }
}

fn cell_center(b: &Bounds, width: usize, height: usize, row: usize, col: usize) -> (f64, f64) {
    let dx = (b.xmax - b.xmin) / width as f64;
    let dy = (b.ymax - b.ymin) / height as f64;
    (b.xmin + (col as f64 + 0.5) * dx, b.ymax - (row as f64 + 0.5) * dy)
}

/// Classifies the centre of every cell in a `resolution × resolution`
/// lattice over `bounds`.
pub fn decision_grid(
    c: &impl Classify,
    num_classes: usize,
    bounds: Bounds,
    resolution: usize,
) -> Result<ClassGrid> {
    if let Some(d) = c.input_dim().filter(|&d| d != 2) {
        return Err(Error::Domain(format!("decision grid needs a 2-D input model, got {d}-D")));
    }
    if resolution < 2 {
        return Err(Error::Domain("grid resolution must be >= 2".into()));
    }
    if !(bounds.xmax > bounds.xmin && bounds.ymax > bounds.ymin) {
        return Err(Error::Domain("empty bounds".into()));
    }
    let rows: Vec<Vec<usize>> = (0..resolution)
        .into_par_iter()
        .map(|r| {
            let mut values = Vec::with_capacity(2 * resolution);
            for col in 0..resolution {
                let (x, y) = cell_center(&bounds, resolution, resolution, r, col);
                values.push(x);
                values.push(y);
            }
            c.classify(&Tensor::matrix(resolution, 2, values)?)
        })
        .collect::<Result<_>>()?;
    let cells: Vec<usize> = rows.into_iter().flatten().collect();
    if let Some(&k) = cells.iter().find(|&&k| k >= num_classes) {
        return Err(Error::Index {
            what: "class",
            index: k,
            bound: num_classes,
        });
    }
    Ok(ClassGrid {
        width: resolution,
        height: resolution,
        num_classes,
        cells,
        bounds,
    })
}

pub fn write_pgm(grid: &ClassGrid, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &grid.to_pgm()?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }
}

// header: magic, width, height, maxval, then one whitespace byte
fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> std::result::Result<(usize, usize, &'a [u8]), String> {
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
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != magic {
        return Err(format!("expected {magic}, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    Ok((w, h, &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fsutil::read(path)?;
    let (width, height, payload) = parse_header(&bytes, "P5").map_err(|m| Error::format(path, m))?;
    if payload.len() != width * height {
        return Err(Error::format(path, "payload size does not match header"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: payload.to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fsutil::read(path)?;
    let (width, height, payload) = parse_header(&bytes, "P6").map_err(|m| Error::format(path, m))?;
    if payload.len() != 3 * width * height {
        return Err(Error::format(path, "payload size does not match header"));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: payload.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [200, 200, 200];

pub fn class_color(k: usize) -> [u8; 3] {
    PALETTE[k % PALETTE.len()]
}

/// Scatter of the first two coordinates, coloured by label, on a square
/// canvas symmetric about the origin and scaled to the largest coordinate.
pub fn scatter_image(points: &Tensor, labels: &[usize], size: usize) -> Result<RgbImage> {
    if points.cols() < 2 || points.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "scatter",
            left: points.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if size < 8 {
        return Err(Error::Domain("scatter canvas must be >= 8 pixels".into()));
    }
    let extent = points
        .row_iter()
        .map(|r| r[0].abs().max(r[1].abs()))
        .fold(0.0, f64::max)
        .max(1e-12)
        * 1.1;
    let mut img = RgbImage::filled(size, size, BACKGROUND);
    let half = size as i64 / 2;
    for i in 0..size as i64 {
        img.put(i, half, AXIS);
        img.put(half, i, AXIS);
    }
    let to_px = |v: f64| ((v / extent + 1.0) * 0.5 * (size - 1) as f64).round() as i64;
    for (row, &label) in points.row_iter().zip(labels) {
        let (px, py) = (to_px(row[0]), size as i64 - 1 - to_px(row[1]));
        for dy in -1..=1 {
            for dx in -1..=1 {
                img.put(px + dx, py + dy, class_color(label));
            }
        }
    }
    Ok(img)
}

pub fn write_scatter_ppm(points: &Tensor, labels: &[usize], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &scatter_image(points, labels, DEFAULT_RESOLUTION)?.to_ppm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BayesClassifier, ConstantClassifier};

    #[test]
    fn two_by_two_pgm_is_fifteen_bytes() {
        let grid = ClassGrid {
            width: 2,
            height: 2,
            num_classes: 2,
            cells: vec![0, 1, 1, 0],
            bounds: Bounds::default(),
        };
        let bytes = grid.to_pgm().unwrap();
        assert_eq!(bytes.len(), 15);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 255, 0]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        write_pgm(&grid, &path).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(ClassGrid::from_gray(&img, 2, Bounds::default()).unwrap(), grid);
    }

    #[test]
    fn gray_mapping_for_three_classes() {
        assert_eq!((0..3).map(|k| gray_level(k, 3)).collect::<Vec<_>>(), vec![0, 127, 255]);
    }

    #[test]
    fn constant_classifier_gives_uniform_grid() {
        let grid = decision_grid(&ConstantClassifier(1), 2, Bounds::default(), 16).unwrap();
        assert!(grid.cells.iter().all(|&k| k == 1));
    }

    #[test]
    fn bayes_grid_is_quadrant_pattern() {
        let spec = crate::data::poc_spec();
        let grid = decision_grid(&BayesClassifier(&spec), 2, Bounds::default(), 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let (x, y) = grid.cell_center(r, c);
                assert_eq!(grid.get(r, c), usize::from(x * y > 0.0));
            }
        }
        // top-left cell is (−x, +y): class 0
        assert_eq!(grid.get(0, 0), 0);
    }

    #[test]
    fn non_planar_model_rejected() {
        let c = crate::models::build_probe(0, 3, None, 2, 0).unwrap();
        assert!(matches!(decision_grid(&c, 2, Bounds::default(), 8), Err(Error::Domain(_))));
        assert!(decision_grid(&ConstantClassifier(0), 2, Bounds::default(), 1).is_err());
    }

    #[test]
    fn scatter_ppm_header_and_round_trip() {
        let pts = Tensor::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        let img = scatter_image(&pts, &[0, 1], 32).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ppm");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
        assert!(img.pixels.contains(&class_color(0)));
        assert!(img.pixels.contains(&class_color(1)));
    }
}
