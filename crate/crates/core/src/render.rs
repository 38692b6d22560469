//! Heatmap images, contour lines, and plain-text exports of a surface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::surface::SurfaceGrid;

/// Losses are clamped to this before taking the natural log.
pub const LOG_FLOOR: f64 = 1e-12;
pub const SENTINEL_COLOR: [u8; 3] = [255, 0, 255];
pub const CLIPPED_COLOR: [u8; 3] = [230, 230, 230];
pub const CONTOUR_COLOR: [u8; 3] = [255, 255, 255];
const LEGEND_GAP: usize = 4;
const LEGEND_BAR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Viridis,
    Gray,
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viridis" => Ok(Colormap::Viridis),
            "gray" | "grey" => Ok(Colormap::Gray),
            other => Err(Error::InvalidArgument(format!("unknown colormap {other:?}"))),
        }
    }
}

const VIRIDIS: [[u8; 3]; 10] = [
    [0x44, 0x01, 0x54],
    [0x48, 0x28, 0x78],
    [0x3e, 0x49, 0x89],
    [0x31, 0x68, 0x8e],
    [0x26, 0x82, 0x8e],
    [0x1f, 0x9e, 0x89],
    [0x35, 0xb7, 0x79],
    [0x6e, 0xce, 0x58],
    [0xb5, 0xde, 0x2b],
    [0xfd, 0xe7, 0x25],
];

impl Colormap {
    /// Color for `t` in `[0, 1]`.
    pub fn color(self, t: f64) -> [u8; 3] {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
        match self {
            Colormap::Gray => {
                let g = (t * 255.0).round() as u8;
                [g, g, g]
            }
            Colormap::Viridis => {
                let x = t * (VIRIDIS.len() - 1) as f64;
                let k = (x.floor() as usize).min(VIRIDIS.len() - 2);
                let f = x - k as f64;
                let (a, b) = (VIRIDIS[k], VIRIDIS[k + 1]);
                [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourLevels {
    /// Loss values.
    List(Vec<f64>),
    /// Evenly spaced in the rendered scale, strictly between its bounds.
    Count(usize),
}

impl Default for ContourLevels {
    fn default() -> Self {
        ContourLevels::Count(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub log_scale: bool,
    pub colormap: Colormap,
    pub contours: ContourLevels,
    pub clip_radius: Option<f64>,
    pub width: usize,
    pub height: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            log_scale: true,
            colormap: Colormap::Viridis,
            contours: ContourLevels::Count(10),
            clip_radius: None,
            width: 408,
            height: 408,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| {
            Err(Error::Config {
                field: "render".into(),
                detail: detail.into(),
            })
        };
        if let Some(r) = self.clip_radius {
            if !(r > 0.0 && r.is_finite()) {
                return bad("clip radius must be positive");
            }
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if let ContourLevels::List(levels) = &self.contours {
            if levels.iter().any(|l| !l.is_finite()) {
                return bad("contour levels must be finite");
            }
        }
        Ok(())
    }

    fn transform(&self, loss: f64) -> f64 {
        if self.log_scale {
            loss.max(LOG_FLOOR).ln()
        } else {
            loss
        }
    }

    fn inverse(&self, value: f64) -> f64 {
        if self.log_scale {
            value.exp()
        } else {
            value
        }
    }
}

/// How a single grid point is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Value(f64),
    Sentinel,
    Clipped,
}

/// Per-cell rendered values plus the color-scale bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub cells: Vec<Cell>,
    pub vmin: f64,
    pub vmax: f64,
}

pub fn cell_field(grid: &SurfaceGrid, opts: &RenderOptions) -> Result<CellField> {
    opts.validate()?;
    let spec = &grid.spec;
    let mut cells = Vec::with_capacity(grid.losses.len());
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..spec.resolution_a {
        for j in 0..spec.resolution_b {
            let (a, b) = (spec.alpha(i), spec.beta(j));
            let loss = grid.at(i, j);
            let cell = if opts.clip_radius.is_some_and(|r| (a * a + b * b).sqrt() > r) {
                Cell::Clipped
            } else if !loss.is_finite() {
                Cell::Sentinel
            } else {
                let v = opts.transform(loss);
                vmin = vmin.min(v);
                vmax = vmax.max(v);
                Cell::Value(v)
            };
            cells.push(cell);
        }
    }
    if !vmin.is_finite() {
        return Err(Error::AllSentinel);
    }
    Ok(CellField { cells, vmin, vmax })
}

/// Cell colors in grid order (row = α).
pub fn cell_colors(grid: &SurfaceGrid, opts: &RenderOptions) -> Result<Vec<[u8; 3]>> {
    let field = cell_field(grid, opts)?;
    Ok(colorize(&field, opts.colormap))
}

fn colorize(field: &CellField, map: Colormap) -> Vec<[u8; 3]> {
    let span = field.vmax - field.vmin;
    field
        .cells
        .iter()
        .map(|c| match *c {
            Cell::Value(v) => map.color(if span > 0.0 { (v - field.vmin) / span } else { 0.0 }),
            Cell::Sentinel => SENTINEL_COLOR,
            Cell::Clipped => CLIPPED_COLOR,
        })
        .collect()
}

/// Contour levels in loss units for the given options.
pub fn resolve_levels(field: &CellField, opts: &RenderOptions) -> Vec<f64> {
    match &opts.contours {
        ContourLevels::List(levels) => levels.clone(),
        ContourLevels::Count(n) => {
            let span = field.vmax - field.vmin;
            if span <= 0.0 {
                return Vec::new();
            }
            (1..=*n)
                .map(|k| opts.inverse(field.vmin + span * k as f64 / (*n + 1) as f64))
                .collect()
        }
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.set(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                c,
            );
        }
    }
}

/// Renders a binary PPM (P6). α runs left to right, β bottom to top; a
/// colorbar on the right spans `vmin` (bottom) to `vmax` (top), and the
/// bounds are recorded in header comments.
pub fn render_heatmap(grid: &SurfaceGrid, opts: &RenderOptions) -> Result<Vec<u8>> {
    let field = cell_field(grid, opts)?;
    let colors = colorize(&field, opts.colormap);
    let spec = &grid.spec;
    let (ra, rb) = (spec.resolution_a, spec.resolution_b);
    let (w, h) = (opts.width, opts.height);
    let total_w = w + LEGEND_GAP + LEGEND_BAR;
    let mut canvas = Canvas {
        width: total_w,
        height: h,
        pixels: vec![[255, 255, 255]; total_w * h],
    };
    for py in 0..h {
        let j = ((h - 1 - py) * rb / h).min(rb - 1);
        for px in 0..w {
            let i = (px * ra / w).min(ra - 1);
            canvas.pixels[py * total_w + px] = colors[i * rb + j];
        }
    }
    // Grid point i sits at the center of its block of pixels.
    let to_px = |a: f64, b: f64| {
        let fi = (a - spec.alpha_min) / (spec.alpha_max - spec.alpha_min) * (ra - 1) as f64;
        let fj = (b - spec.beta_min) / (spec.beta_max - spec.beta_min) * (rb - 1) as f64;
        let x = (fi + 0.5) * w as f64 / ra as f64 - 0.5;
        let y = h as f64 - (fj + 0.5) * h as f64 / rb as f64 - 0.5;
        (x, y)
    };
    let levels = resolve_levels(&field, opts);
    for set in extract_contours(grid, &levels) {
        for line in &set.polylines {
            let pts: Vec<(f64, f64)> = line.points.iter().map(|&(a, b)| to_px(a, b)).collect();
            for seg in pts.windows(2) {
                canvas.line(seg[0], seg[1], CONTOUR_COLOR);
            }
            if line.closed && pts.len() > 2 {
                canvas.line(pts[pts.len() - 1], pts[0], CONTOUR_COLOR);
            }
        }
    }
    for py in 0..h {
        let t = if h > 1 { 1.0 - py as f64 / (h - 1) as f64 } else { 0.0 };
        let c = opts.colormap.color(t);
        for px in w + LEGEND_GAP..total_w {
            canvas.pixels[py * total_w + px] = c;
        }
    }
    let mut out = format!(
        "P6\n# scale {}\n# vmin {}\n# vmax {}\n# colormap {:?}\n{} {}\n255\n",
        if opts.log_scale { "ln" } else { "linear" },
        field.vmin,
        field.vmax,
        opts.colormap,
        total_w,
        h
    )
    .into_bytes();
    out.extend(canvas.pixels.iter().flatten());
    Ok(out)
}

pub fn render_heatmap_to(grid: &SurfaceGrid, opts: &RenderOptions, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &render_heatmap(grid, opts)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// `(α, β)` vertices; a closed line does not repeat its first vertex.
    pub points: Vec<(f64, f64)>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourSet {
    pub level: f64,
    pub polylines: Vec<Polyline>,
}

/// Marching squares. Non-finite losses count as above every level; an edge
/// with one non-finite end is crossed at its midpoint. Saddles are split by
/// comparing the mean of the four corners against the level.
pub fn extract_contours(grid: &SurfaceGrid, levels: &[f64]) -> Vec<ContourSet> {
    levels
        .iter()
        .map(|&level| ContourSet {
            level,
            polylines: contour_level(grid, level),
        })
        .collect()
}

fn contour_level(grid: &SurfaceGrid, level: f64) -> Vec<Polyline> {
    let spec = &grid.spec;
    let (ra, rb) = (spec.resolution_a, spec.resolution_b);
    let above = |i: usize, j: usize| {
        let v = grid.at(i, j);
        !v.is_finite() || v > level
    };
    let h = |i: usize, j: usize| 2 * (i * rb + j);
    let v = |i: usize, j: usize| 2 * (i * rb + j) + 1;

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for i in 0..ra - 1 {
        for j in 0..rb - 1 {
            let s = [above(i, j), above(i + 1, j), above(i + 1, j + 1), above(i, j + 1)];
            // Edge k joins corner k and corner k+1.
            let edges = [h(i, j), v(i + 1, j), h(i, j + 1), v(i, j)];
            let crossed: Vec<usize> = (0..4).filter(|&k| s[k] != s[(k + 1) % 4]).collect();
            match crossed.len() {
                2 => segments.push((edges[crossed[0]], edges[crossed[1]])),
                4 => {
                    let corners = [grid.at(i, j), grid.at(i + 1, j), grid.at(i + 1, j + 1), grid.at(i, j + 1)];
                    let center_above = corners.iter().any(|c| !c.is_finite())
                        || corners.iter().sum::<f64>() / 4.0 > level;
                    // Cut off each corner whose state differs from the center.
                    for k in 0..4 {
                        if s[k] != center_above {
                            segments.push((edges[(k + 3) % 4], edges[k]));
                        }
                    }
                }
                _ => {}
            }
        }
    }

    let point = |key: usize| -> (f64, f64) {
        let cell = key / 2;
        let (i, j) = (cell / rb, cell % rb);
        let (i2, j2) = if key % 2 == 0 { (i + 1, j) } else { (i, j + 1) };
        let (va, vb) = (grid.at(i, j), grid.at(i2, j2));
        let t = if va.is_finite() && vb.is_finite() && va != vb {
            ((level - va) / (vb - va)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let (a0, b0) = (spec.alpha(i), spec.beta(j));
        let (a1, b1) = (spec.alpha(i2), spec.beta(j2));
        (a0 + t * (a1 - a0), b0 + t * (b1 - b0))
    };

    let mut touching: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, &(a, b)) in segments.iter().enumerate() {
        touching.entry(a).or_default().push(s);
        touching.entry(b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let next_from = |key: usize, used: &mut Vec<bool>| -> Option<usize> {
        let s = *touching.get(&key)?.iter().find(|&&s| !used[s])?;
        used[s] = true;
        let (a, b) = segments[s];
        Some(if a == key { b } else { a })
    };

    let mut lines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut keys = std::collections::VecDeque::from([a, b]);
        while let Some(k) = next_from(*keys.back().unwrap(), &mut used) {
            keys.push_back(k);
        }
        while let Some(k) = next_from(*keys.front().unwrap(), &mut used) {
            keys.push_front(k);
        }
        let closed = keys.len() > 2 && keys.front() == keys.back();
        if closed {
            keys.pop_back();
        }
        lines.push(Polyline {
            points: keys.into_iter().map(point).collect(),
            closed,
        });
    }
    lines
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Tab-separated `alpha beta loss` rows after a `#` metadata preamble.
/// Non-finite losses are written as `nan`.
pub fn surface_to_text(grid: &SurfaceGrid) -> String {
    let spec = &grid.spec;
    let m = &grid.meta;
    let mut out = String::new();
    let _ = writeln!(out, "# lottery-landscape surface v1");
    let _ = writeln!(
        out,
        "# grid alpha [{}, {}] beta [{}, {}] resolution {}x{}",
        spec.alpha_min, spec.alpha_max, spec.beta_min, spec.beta_max, spec.resolution_a, spec.resolution_b
    );
    let _ = writeln!(out, "# direction_seeds {} {}", m.direction_seeds.0, m.direction_seeds.1);
    let _ = writeln!(out, "# checkpoint_digest {}", m.checkpoint_digest);
    let _ = writeln!(out, "# mask_digest {}", m.mask_digest.as_deref().unwrap_or("none"));
    let _ = writeln!(out, "# eval {} n {} seed {}", m.eval_source, m.eval_n, m.eval_seed);
    let _ = writeln!(out, "# loss {}", m.loss_kind);
    let _ = writeln!(out, "# center_loss {}", fmt_f64(grid.center_loss));
    let _ = writeln!(out, "alpha\tbeta\tloss");
    for i in 0..spec.resolution_a {
        for j in 0..spec.resolution_b {
            let loss = grid.at(i, j);
            let loss = if loss.is_finite() { fmt_f64(loss) } else { "nan".into() };
            let _ = writeln!(out, "{}\t{}\t{}", fmt_f64(spec.alpha(i)), fmt_f64(spec.beta(j)), loss);
        }
    }
    out
}

/// Reads back the rows of [`surface_to_text`].
pub fn parse_surface_text(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let bad = |line: usize, detail: &str| Error::Format {
        path: "<surface text>".into(),
        detail: format!("line {}: {detail}", line + 1),
    };
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !seen_header {
            if line != "alpha\tbeta\tloss" {
                return Err(bad(n, "expected column header"));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(n, "expected three fields"));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "not a number"));
        rows.push((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
    }
    Ok(rows)
}

/// One block per polyline: a `# level L polyline K closed|open N` line then
/// `N` tab-separated `alpha beta` rows.
pub fn contours_to_text(sets: &[ContourSet]) -> String {
    let mut out = String::from("# lottery-landscape contours v1\n");
    for set in sets {
        for (k, line) in set.polylines.iter().enumerate() {
            let _ = writeln!(
                out,
                "# level {} polyline {} {} {}",
                fmt_f64(set.level),
                k,
                if line.closed { "closed" } else { "open" },
                line.points.len()
            );
            for &(a, b) in &line.points {
                let _ = writeln!(out, "{}\t{}", fmt_f64(a), fmt_f64(b));
            }
        }
    }
    out
}
