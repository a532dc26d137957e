//! Two-level urban partition: m square subregions (cells) tiled by q
//! rectangular coarse regions, plus per-subregion static road attributes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// On-disk description of a grid (`grid.json`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    /// [lat0, lon0, lat1, lon1] with lat0 < lat1, lon0 < lon1.
    pub bbox: [f64; 4],
    pub cell_meters: f64,
    pub rect_rows: usize,
    pub rect_cols: usize,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UrbanGrid {
    pub bbox: [f64; 4],
    pub cell_meters: f64,
    pub rows: usize,
    pub cols: usize,
    pub rect_rows: usize,
    pub rect_cols: usize,
}

impl UrbanGrid {
    /// Splits the bounding box into square cells of `cell_meters` side and
    /// groups them into `rect_rows` × `rect_cols` rectangles. Subregion ids
    /// are row-major.
    pub fn partition(
        bbox: [f64; 4],
        cell_meters: f64,
        rect_rows: usize,
        rect_cols: usize,
    ) -> Result<Self> {
        let [lat0, lon0, lat1, lon1] = bbox;
        if !(lat1 > lat0 && lon1 > lon0) || !bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!("partition: degenerate bbox {bbox:?}")));
        }
        if !(cell_meters > 0.0) {
            return Err(Error::config(format!(
                "partition: cell length must be positive, got {cell_meters}"
            )));
        }
        let mid_lat = 0.5 * (lat0 + lat1);
        let height_m = (lat1 - lat0) * METERS_PER_DEG_LAT;
        let width_m = (lon1 - lon0) * METERS_PER_DEG_LAT * mid_lat.to_radians().cos();
        let rows = (height_m / cell_meters).round() as usize;
        let cols = (width_m / cell_meters).round() as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "partition: bbox spans no full cell at {cell_meters} m"
            )));
        }
        if rect_rows == 0 || rect_cols == 0 || rows % rect_rows != 0 || cols % rect_cols != 0 {
            return Err(Error::config(format!(
                "partition: rectangle grid {rect_rows}x{rect_cols} does not divide the \
                 {rows}x{cols} cell grid"
            )));
        }
        Ok(UrbanGrid {
            bbox,
            cell_meters,
            rows,
            cols,
            rect_rows,
            rect_cols,
        })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        UrbanGrid::partition(spec.bbox, spec.cell_meters, spec.rect_rows, spec.rect_cols)
    }

    pub fn to_spec(&self) -> GridSpec {
        GridSpec {
            bbox: self.bbox,
            cell_meters: self.cell_meters,
            rect_rows: self.rect_rows,
            rect_cols: self.rect_cols,
        }
    }

    /// Builds a bbox (anchored near a fixed origin) that partitions into
    /// exactly `rows` × `cols` cells. Used by the synthesizer and tests.
    pub fn synthetic(
        rows: usize,
        cols: usize,
        cell_meters: f64,
        rect_rows: usize,
        rect_cols: usize,
    ) -> Result<Self> {
        let lat0 = 40.70;
        let lon0 = -74.02;
        let lat1 = lat0 + rows as f64 * cell_meters / METERS_PER_DEG_LAT;
        let mid_lat = 0.5 * (lat0 + lat1);
        let lon1 = lon0
            + cols as f64 * cell_meters / (METERS_PER_DEG_LAT * mid_lat.to_radians().cos());
        let grid = UrbanGrid::partition([lat0, lon0, lat1, lon1], cell_meters, rect_rows, rect_cols)?;
        if grid.rows != rows || grid.cols != cols {
            return Err(Error::contract("synthetic grid did not round-trip"));
        }
        Ok(grid)
    }

    /// Number of subregions.
    pub fn m(&self) -> usize {
        self.rows * self.cols
    }

    /// Number of rectangular coarse regions.
    pub fn q(&self) -> usize {
        self.rect_rows * self.rect_cols
    }

    pub fn cell_rc(&self, id: usize) -> (usize, usize) {
        (id / self.cols, id % self.cols)
    }

    pub fn cell_id(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Rectangle id (row-major over the rectangle grid) containing a cell.
    pub fn rect_of(&self, cell: usize) -> usize {
        let (r, c) = self.cell_rc(cell);
        let block_h = self.rows / self.rect_rows;
        let block_w = self.cols / self.rect_cols;
        (r / block_h) * self.rect_cols + (c / block_w)
    }

    /// Cells contained in one rectangle, ascending by id.
    pub fn cells_in_rect(&self, rect: usize) -> Vec<usize> {
        (0..self.m()).filter(|&c| self.rect_of(c) == rect).collect()
    }

    pub fn cell_center(&self, id: usize) -> (f64, f64) {
        let (r, c) = self.cell_rc(id);
        let lat_step = (self.bbox[2] - self.bbox[0]) / self.rows as f64;
        let lon_step = (self.bbox[3] - self.bbox[1]) / self.cols as f64;
        (
            self.bbox[0] + (r as f64 + 0.5) * lat_step,
            self.bbox[1] + (c as f64 + 0.5) * lon_step,
        )
    }

    /// Subregion containing a coordinate, if inside the bbox.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<usize> {
        let lat_step = (self.bbox[2] - self.bbox[0]) / self.rows as f64;
        let lon_step = (self.bbox[3] - self.bbox[1]) / self.cols as f64;
        let r = ((lat - self.bbox[0]) / lat_step).floor();
        let c = ((lon - self.bbox[1]) / lon_step).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some(self.cell_id(r as usize, c as usize))
    }

    /// 8-neighborhood adjacency as a flat m×m 0/1 matrix (zero diagonal).
    pub fn adjacency(&self) -> Vec<u8> {
        let m = self.m();
        let mut adj = vec![0u8; m * m];
        for id in 0..m {
            let (r, c) = self.cell_rc(id);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= self.rows as i64 || nc >= self.cols as i64 {
                        continue;
                    }
                    let nid = self.cell_id(nr as usize, nc as usize);
                    adj[id * m + nid] = 1;
                }
            }
        }
        adj
    }
}

/// Per-subregion static road attributes, indexed by subregion id.
#[derive(Clone, Debug)]
pub struct StaticFeatureTable {
    pub names: Vec<String>,
    /// m × dim, row-major.
    pub values: Vec<f64>,
    pub dim: usize,
}

impl StaticFeatureTable {
    pub fn new(names: Vec<String>, values: Vec<f64>, m: usize) -> Result<Self> {
        let dim = names.len();
        if dim == 0 || values.len() != m * dim {
            return Err(Error::data(format!(
                "static features: expected {m} rows x {dim} attributes, got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::data(
                "static features must be finite and nonnegative",
            ));
        }
        Ok(StaticFeatureTable { names, values, dim })
    }

    pub fn m(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    /// Reads `static.csv`: header `subregion_id,<attr>...`, one row per
    /// subregion, every id in 0..m exactly once.
    pub fn load_csv(path: &Path, m: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 || &headers[0] != "subregion_id" {
            return Err(Error::data(format!(
                "{}: expected header starting with subregion_id",
                path.display()
            )));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let dim = names.len();
        let mut values = vec![f64::NAN; m * dim];
        let mut seen = vec![false; m];
        for rec in rdr.records() {
            let rec = rec?;
            let id: usize = rec[0]
                .parse()
                .map_err(|_| Error::data(format!("bad subregion_id '{}'", &rec[0])))?;
            if id >= m {
                return Err(Error::data(format!(
                    "subregion_id {id} out of range for m={m}"
                )));
            }
            if seen[id] {
                return Err(Error::data(format!("duplicate subregion_id {id}")));
            }
            seen[id] = true;
            for (j, field) in rec.iter().skip(1).enumerate() {
                values[id * dim + j] = field
                    .parse()
                    .map_err(|_| Error::data(format!("bad attribute value '{field}'")))?;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::data(format!("subregion_id {missing} missing")));
        }
        StaticFeatureTable::new(names, values, m)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subregion_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for id in 0..self.m() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.row(id).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
