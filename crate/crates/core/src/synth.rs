//! Deterministic synthetic person-search scenes.
//!
//! Each labeled identity is a procedurally textured glyph: banded/checkered
//! patterns in glyph-relative coordinates (so the tight crop of an identity
//! looks the same at every scale it is drawn at), a head band, an emblem
//! block, and a small high-contrast attribute mark placed just outside the
//! annotated box. Scenes composite 1-4 identity instances onto cluttered
//! backgrounds; with some probability an instance gets an unlabeled
//! distractor glyph overlapping part of its box. All colors live on the
//! 1/255 lattice and compositing never blends, so written PPM files read
//! back bit-exact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::Grid2D;
use crate::ppm;
use crate::rng::Rng;
use crate::roi::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(Error::format("split", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Grid2D,
    pub annotations: Vec<Annotation>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub n_ids: usize,
}

impl SceneSet {
    /// All (scene index, annotation) pairs in a given split.
    pub fn split_annotations(&self, split: Split) -> Vec<(usize, &Annotation)> {
        self.scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .flat_map(|(i, s)| s.annotations.iter().map(move |a| (i, a)))
            .collect()
    }

    pub fn occurrences(&self, identity: usize) -> usize {
        self.scenes
            .iter()
            .flat_map(|s| s.annotations.iter())
            .filter(|a| a.identity == identity)
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_ids: usize,
    pub scene_rows: usize,
    pub scene_cols: usize,
    /// Chance that an instance gets a distractor glyph overlapping >= 20%
    /// of its box.
    pub overlap_rate: f64,
    /// Chance of an extra free-standing distractor per scene.
    pub distractor_rate: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Fractions of scenes tagged train / gallery (rest are queries).
    pub train_frac: f64,
    pub gallery_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenes: 64,
            n_ids: 8,
            scene_rows: 256,
            scene_cols: 256,
            overlap_rate: 0.25,
            distractor_rate: 0.3,
            min_instances: 1,
            max_instances: 2,
            train_frac: 0.55,
            gallery_frac: 0.15,
        }
    }
}

/// Color on the 1/255 lattice.
type Color = [f64; 3];

fn q(byte: u8) -> f64 {
    byte as f64 / 255.0
}

/// Appearance recipe of one identity.
///
/// Glyph colors avoid the green-dominant background family, and every glyph
/// carries a per-identity luminance ramp: pooled channel statistics then
/// respond monotonically to a box that over- or under-shoots the glyph,
/// which is what gives the re-ID loss a usable basin around the true box.
#[derive(Debug, Clone)]
struct IdentitySpec {
    bands_u: usize,
    bands_v: usize,
    diagonal: bool,
    fg: Color,
    bg: Color,
    accent: Color,
    head: Color,
    /// Frame drawn on the glyph hull; its pooled share peaks exactly when a
    /// box hugs the glyph, which anchors the loss basin at the true box.
    frame: Color,
    emblem_u: f64,
    /// Ramp strength per axis in [-0.35, 0.35]; sign picks the direction.
    ramp_u: f64,
    ramp_v: f64,
}

fn quantize_color(c: [f64; 3]) -> Color {
    [
        (c[0].clamp(0.0, 1.0) * 255.0).round() / 255.0,
        (c[1].clamp(0.0, 1.0) * 255.0).round() / 255.0,
        (c[2].clamp(0.0, 1.0) * 255.0).round() / 255.0,
    ]
}

impl IdentitySpec {
    fn derive(master: &Rng, id: usize) -> Self {
        // Identities come in pairs sharing the body recipe; head, frame,
        // accent and emblem placement separate the pair. A crop that cuts
        // those regions off is ambiguous between two identities, the
        // missing-attribute failure the refinement is supposed to punish.
        let mut body = master.derive(0x0b0d + (id / 2) as u64);
        let mut rng = master.derive(0x1d00 + id as u64);
        // Red/blue-heavy palettes, green kept low: background inclusion is
        // then visible in the pooled green channel.
        let rb = |rng: &mut Rng, lo: u8, hi: u8| {
            let span = (hi - lo) as usize + 1;
            [
                q(lo + rng.index(span) as u8),
                q(rng.index(50) as u8),
                q(lo + rng.index(span) as u8),
            ]
        };
        let fg = rb(&mut body, 0, 70);
        let bg = rb(&mut body, 170, 255);
        let accent = rb(&mut rng, 200, 255);
        let head = rb(&mut rng, 90, 230);
        // Yellow family: high red and green, low blue; unique against both
        // the glyph body (low green) and the background (low red).
        let frame = [
            q(150 + rng.index(106) as u8),
            q(150 + rng.index(106) as u8),
            q(rng.index(90) as u8),
        ];
        // Within a pair only the band frequency separates the bodies: an
        // under-cropped glyph shows stretched bands that read as the
        // pair-mate's frequency, so the classifier pushes the box to grow
        // back to the true extent.
        let bu0 = 2 + body.index(2);
        let bv0 = 3 + body.index(2);
        IdentitySpec {
            bands_u: bu0 + (id % 2),
            bands_v: bv0 + 2 * (id % 2),
            diagonal: body.index(2) == 1,
            fg,
            bg,
            accent,
            head,
            frame,
            emblem_u: if id % 2 == 0 { 0.12 } else { 0.58 },
            ramp_u: body.range(0.25, 0.45) * if body.index(2) == 0 { 1.0 } else { -1.0 },
            ramp_v: body.range(0.25, 0.45) * if body.index(2) == 0 { 1.0 } else { -1.0 },
        }
    }

    /// Texture color at glyph-relative (u, v) in [0, 1)^2. All transitions
    /// are smooth before quantization: hard texture boundaries sweeping
    /// across the crop border would put a washboard on the pooled-feature
    /// loss and scramble the box gradients.
    fn color_at(&self, u: f64, v: f64) -> Color {
        let lerp = |a: Color, b: Color, t: f64| {
            [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ]
        };
        // Soft square-wave banding: steep enough to feed the 3x3 filters
        // contrast, smooth enough not to ripple the pooled statistics as
        // the box edge sweeps across a band.
        let cycles = if self.diagonal {
            u * self.bands_u as f64 + v * self.bands_v as f64
        } else {
            v * self.bands_v as f64 + 0.25
        };
        let s = (std::f64::consts::TAU * cycles).sin();
        let sharp = 2.5f64;
        let band_mix = 0.5 + 0.5 * (sharp * s).tanh() / sharp.tanh();
        let mut c = lerp(self.fg, self.bg, band_mix);
        // Emblem block.
        let eu = smoothstep(self.emblem_u - 0.05, self.emblem_u, u)
            * (1.0 - smoothstep(self.emblem_u + 0.3, self.emblem_u + 0.35, u));
        let ev = smoothstep(0.34, 0.40, v) * (1.0 - smoothstep(0.54, 0.60, v));
        c = lerp(c, self.accent, eu * ev);
        // Head band.
        c = lerp(c, self.head, 1.0 - smoothstep(0.10, 0.18, v));
        // Frame along the glyph hull.
        let border = (u.min(1.0 - u) / 0.05).min(v.min(1.0 - v) / 0.035);
        c = lerp(c, self.frame, 1.0 - smoothstep(0.8, 1.8, border));
        let shade = 1.0 + self.ramp_u * (u - 0.5) + self.ramp_v * (v - 0.5);
        quantize_color([c[0] * shade, c[1] * shade, c[2] * shade])
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Integer pixel rectangle; the annotated box spans the outermost pixel
/// centers, so `m2 = col + w - 1`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    row: i64,
    col: i64,
    h: usize,
    w: usize,
}

impl Rect {
    fn bbox(&self) -> BBox {
        BBox {
            m1: self.col as f64,
            n1: self.row as f64,
            m2: (self.col + self.w as i64 - 1) as f64,
            n2: (self.row + self.h as i64 - 1) as f64,
        }
    }

    fn intersection_area(&self, other: &Rect) -> f64 {
        let x0 = self.col.max(other.col);
        let y0 = self.row.max(other.row);
        let x1 = (self.col + self.w as i64).min(other.col + other.w as i64);
        let y1 = (self.row + self.h as i64).min(other.row + other.h as i64);
        ((x1 - x0).max(0) * (y1 - y0).max(0)) as f64
    }

    fn area(&self) -> f64 {
        (self.h * self.w) as f64
    }
}

#[derive(Debug, Clone)]
struct SceneLayout {
    split: Split,
    instances: Vec<(usize, Rect)>,
    distractors: Vec<(u64, Rect)>,
}

/// Margin kept between glyph boxes and the canvas border so that perturbed
/// boxes and gradient probes stay renderable.
const BORDER_MARGIN: i64 = 14;

fn place_rect(rng: &mut Rng, cfg: &SynthConfig, taken: &[Rect]) -> Option<Rect> {
    for _ in 0..200 {
        let h = 40 + rng.index(41); // 40..=80
        let w = h / 2;
        let max_row = cfg.scene_rows as i64 - BORDER_MARGIN - h as i64;
        let max_col = cfg.scene_cols as i64 - BORDER_MARGIN - w as i64;
        if max_row <= BORDER_MARGIN || max_col <= BORDER_MARGIN {
            continue;
        }
        let rect = Rect {
            row: BORDER_MARGIN + rng.index((max_row - BORDER_MARGIN) as usize) as i64,
            col: BORDER_MARGIN + rng.index((max_col - BORDER_MARGIN) as usize) as i64,
            h,
            w,
        };
        // Keep instances apart: a 6 px halo also keeps attribute marks clear
        // of neighboring boxes.
        let halo = Rect {
            row: rect.row - 6,
            col: rect.col - 6,
            h: rect.h + 12,
            w: rect.w + 12,
        };
        if taken.iter().all(|t| halo.intersection_area(t) == 0.0) {
            return Some(rect);
        }
    }
    None
}

/// Distractor rect overlapping `target` by at least 20% of the target area,
/// entering from a random side.
fn place_overlapping(rng: &mut Rng, cfg: &SynthConfig, target: &Rect) -> Option<Rect> {
    for _ in 0..500 {
        let h = 40 + rng.index(41);
        let w = h / 2;
        let from_left = rng.index(2) == 0;
        let col = if from_left {
            target.col - w as i64 + (target.w as i64 * 2 / 5) + rng.index(6) as i64
        } else {
            target.col + target.w as i64 - (target.w as i64 * 2 / 5) - rng.index(6) as i64
        };
        let row = target.row + rng.index(target.h / 2) as i64 - (h as i64 - target.h as i64) / 2;
        let rect = Rect { row, col, h, w };
        let inside = rect.row >= 2
            && rect.col >= 2
            && rect.row + (rect.h as i64) < cfg.scene_rows as i64 - 2
            && rect.col + (rect.w as i64) < cfg.scene_cols as i64 - 2;
        if !inside {
            continue;
        }
        if rect.intersection_area(target) >= 0.2 * target.area() {
            return Some(rect);
        }
    }
    None
}

fn layout_scenes(cfg: &SynthConfig, master: &Rng) -> Result<Vec<SceneLayout>> {
    let mut rng = master.derive(0x5ce0);
    let n_train = ((cfg.n_scenes as f64) * cfg.train_frac).round() as usize;
    let n_gallery = ((cfg.n_scenes as f64) * cfg.gallery_frac).round() as usize;

    // Identities cycle within each split so every identity keeps appearing.
    let mut cursors = [0usize; 3];
    let mut layouts = Vec::with_capacity(cfg.n_scenes);
    for scene_idx in 0..cfg.n_scenes {
        let split = if scene_idx < n_train {
            Split::Train
        } else if scene_idx < n_train + n_gallery {
            Split::Gallery
        } else {
            Split::Query
        };
        let cursor = &mut cursors[match split {
            Split::Train => 0,
            Split::Gallery => 1,
            Split::Query => 2,
        }];

        let span = cfg.max_instances - cfg.min_instances + 1;
        let count = (cfg.min_instances + rng.index(span)).min(cfg.n_ids);
        let mut instances = Vec::with_capacity(count);
        let mut rects: Vec<Rect> = Vec::new();
        for j in 0..count {
            let id = (*cursor + j) % cfg.n_ids;
            let Some(rect) = place_rect(&mut rng, cfg, &rects) else {
                if j == 0 {
                    return Err(Error::CanvasTooSmall {
                        rows: cfg.scene_rows,
                        cols: cfg.scene_cols,
                        requested: count,
                    });
                }
                break;
            };
            rects.push(rect);
            instances.push((id, rect));
        }
        *cursor = (*cursor + instances.len()) % cfg.n_ids;

        let mut distractors = Vec::new();
        for (slot, (_, rect)) in instances.iter().enumerate() {
            if rng.uniform() < cfg.overlap_rate {
                if let Some(d) = place_overlapping(&mut rng, cfg, rect) {
                    distractors.push((0xd15 + (scene_idx * 8 + slot) as u64, d));
                }
            }
        }
        if cfg.overlap_rate == 0.0 && cfg.distractor_rate > 0.0 && rng.uniform() < cfg.distractor_rate
        {
            // Free-standing distractor, kept clear of every instance box.
            if let Some(d) = place_rect(&mut rng, cfg, &rects) {
                distractors.push((0xf7ee + scene_idx as u64, d));
            }
        } else if cfg.overlap_rate > 0.0 && rng.uniform() < cfg.distractor_rate {
            if let Some(d) = place_rect(&mut rng, cfg, &rects) {
                distractors.push((0xf7ee + scene_idx as u64, d));
            }
        }

        layouts.push(SceneLayout {
            split,
            instances,
            distractors,
        });
    }
    Ok(layouts)
}

fn paint_glyph(img: &mut Grid2D, spec: &IdentitySpec, rect: &Rect) {
    for r in 0..rect.h {
        for c in 0..rect.w {
            let u = c as f64 / rect.w as f64;
            let v = r as f64 / rect.h as f64;
            img.paint(rect.row + r as i64, rect.col + c as i64, &spec.color_at(u, v));
        }
    }
}

/// High-contrast attribute mark just right of the glyph at shoulder height.
/// The 2 px gap keeps it outside the tight annotated box.
fn paint_attribute_mark(img: &mut Grid2D, spec: &IdentitySpec, rect: &Rect) {
    let size = 6i64;
    let row0 = rect.row + rect.h as i64 / 4;
    let col0 = rect.col + rect.w as i64 + 2;
    for r in 0..size {
        for c in 0..size {
            let border = r == 0 || c == 0 || r == size - 1 || c == size - 1;
            let color = if border { spec.fg } else { spec.accent };
            img.paint(row0 + r, col0 + c, &color);
        }
    }
}

/// Green-dominant background color, disjoint from the glyph palettes.
fn background_color(rng: &mut Rng) -> Color {
    [
        q(50 + rng.index(60) as u8),
        q(130 + rng.index(80) as u8),
        q(50 + rng.index(60) as u8),
    ]
}

fn render_background(img: &mut Grid2D, rng: &mut Rng) {
    let base = background_color(rng);
    for row in 0..img.rows() {
        for col in 0..img.cols() {
            img.paint(row as i64, col as i64, &base);
        }
    }
    // Soft clutter blobs from the same family; hard clutter edges would
    // ripple the pooled statistics as box borders sweep over them.
    let n_blobs = 6 + rng.index(6);
    for _ in 0..n_blobs {
        let color = background_color(rng);
        let rh = (8 + rng.index(40)) as f64;
        let rw = (8 + rng.index(40)) as f64;
        let cy = rng.index(img.rows()) as f64;
        let cx = rng.index(img.cols()) as f64;
        let r0 = (cy - rh - 1.0).max(0.0) as usize;
        let r1 = ((cy + rh + 2.0) as usize).min(img.rows());
        let c0 = (cx - rw - 1.0).max(0.0) as usize;
        let c1 = ((cx + rw + 2.0) as usize).min(img.cols());
        for r in r0..r1 {
            for c in c0..c1 {
                let d = ((r as f64 - cy) / rh).hypot((c as f64 - cx) / rw);
                let t = 1.0 - smoothstep(0.7, 1.0, d);
                if t > 0.0 {
                    let idx = img.flat_index(r, c, 0);
                    let cur = [
                        img.data()[idx],
                        img.data()[idx + 1],
                        img.data()[idx + 2],
                    ];
                    let mixed = quantize_color([
                        cur[0] + (color[0] - cur[0]) * t,
                        cur[1] + (color[1] - cur[1]) * t,
                        cur[2] + (color[2] - cur[2]) * t,
                    ]);
                    img.paint(r as i64, c as i64, &mixed);
                }
            }
        }
    }
    // Sparse speckles.
    let n_speckle = img.rows() * img.cols() / 64;
    for _ in 0..n_speckle {
        let color = background_color(rng);
        let row = rng.index(img.rows()) as i64;
        let col = rng.index(img.cols()) as i64;
        img.paint(row, col, &color);
    }
}

/// Renders one scene from its layout. Deterministic given (master, index).
fn render_scene(
    cfg: &SynthConfig,
    master: &Rng,
    specs: &[IdentitySpec],
    layout: &SceneLayout,
    index: usize,
) -> Scene {
    let mut rng = master.derive(0xbac0 + index as u64);
    let mut img = Grid2D::zeros(cfg.scene_rows, cfg.scene_cols, 3);
    render_background(&mut img, &mut rng);

    // Distractors first so identity glyphs occlude the overlap region.
    for (seed, rect) in &layout.distractors {
        let spec = IdentitySpec::derive(master, 0x600000 + *seed as usize);
        paint_glyph(&mut img, &spec, rect);
    }
    for (id, rect) in &layout.instances {
        paint_glyph(&mut img, &specs[*id], rect);
        paint_attribute_mark(&mut img, &specs[*id], rect);
    }

    Scene {
        image: img,
        annotations: layout
            .instances
            .iter()
            .map(|(id, rect)| Annotation {
                bbox: rect.bbox(),
                identity: *id,
            })
            .collect(),
        split: layout.split,
    }
}

/// Record of where distractor glyphs were painted, for overlap audits.
#[derive(Debug, Clone, Default)]
pub struct SynthAudit {
    pub distractor_boxes: Vec<(usize, BBox)>,
}

/// Generates a full scene set. Layout decisions run sequentially on the
/// master generator; pixel rendering is data-parallel per scene with derived
/// seeds, so output does not depend on thread scheduling.
pub fn synth(cfg: &SynthConfig, rng: &Rng) -> Result<(SceneSet, SynthAudit)> {
    if cfg.n_ids < 2 {
        return Err(Error::TooFewIdentities { n_id: cfg.n_ids });
    }
    assert!(cfg.min_instances >= 1 && cfg.max_instances >= cfg.min_instances);
    assert!((0.0..=1.0).contains(&cfg.overlap_rate));
    assert!((0.0..=1.0).contains(&cfg.distractor_rate));

    let specs: Vec<IdentitySpec> = (0..cfg.n_ids)
        .map(|id| IdentitySpec::derive(rng, id))
        .collect();
    let layouts = layout_scenes(cfg, rng)?;

    let scenes = exec::map_indexed(layouts.len(), |i| {
        render_scene(cfg, rng, &specs, &layouts[i], i)
    });

    let audit = SynthAudit {
        distractor_boxes: layouts
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.distractors.iter().map(move |(_, r)| (i, r.bbox())))
            .collect(),
    };

    let set = SceneSet {
        scenes,
        n_ids: cfg.n_ids,
    };

    // Retrieval needs a positive pair for every identity.
    for id in 0..cfg.n_ids {
        if set.occurrences(id) < 2 {
            return Err(Error::format(
                "synth",
                format!("identity {id} occurs fewer than 2 times; use more scenes"),
            ));
        }
    }
    Ok((set, audit))
}

/// Writes `scene_%04d.ppm` plus `annotations.csv` into `dir`.
pub fn write_scene_set(set: &SceneSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, scene) in set.scenes.iter().enumerate() {
        ppm::write_ppm(&dir.join(format!("scene_{i:04}.ppm")), &scene.image)?;
    }
    let mut csv = String::from("scene,x1,y1,x2,y2,id,split\n");
    for (i, scene) in set.scenes.iter().enumerate() {
        for ann in &scene.annotations {
            let b = &ann.bbox;
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                b.m1, b.n1, b.m2, b.n2, ann.identity, scene.split
            ));
        }
    }
    std::fs::write(dir.join("annotations.csv"), csv)?;
    Ok(())
}

/// Reads back a directory written by [`write_scene_set`].
pub fn read_scene_set(dir: &Path) -> Result<SceneSet> {
    let csv = std::fs::read_to_string(dir.join("annotations.csv"))?;
    let mut rows: Vec<(usize, Annotation, Split)> = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::format(
                "annotations.csv",
                format!("line {}: expected 7 fields", lineno + 1),
            ));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format("annotations.csv", format!("bad number {s:?}")))
        };
        let scene: usize = parts[0]
            .parse()
            .map_err(|_| Error::format("annotations.csv", "bad scene index"))?;
        let bbox = BBox {
            m1: parse_f(parts[1])?,
            n1: parse_f(parts[2])?,
            m2: parse_f(parts[3])?,
            n2: parse_f(parts[4])?,
        };
        let identity: usize = parts[5]
            .parse()
            .map_err(|_| Error::format("annotations.csv", "bad identity"))?;
        rows.push((scene, Annotation { bbox, identity }, parts[6].parse()?));
    }

    let n_scenes = rows.iter().map(|(s, _, _)| s + 1).max().unwrap_or(0);
    let mut scenes = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let image = ppm::read_ppm(&dir.join(format!("scene_{i:04}.ppm")))?;
        let split = rows
            .iter()
            .find(|(s, _, _)| *s == i)
            .map(|(_, _, sp)| *sp)
            .ok_or_else(|| Error::format("annotations.csv", format!("scene {i} has no rows")))?;
        scenes.push(Scene {
            image,
            annotations: rows
                .iter()
                .filter(|(s, _, _)| *s == i)
                .map(|(_, a, _)| a.clone())
                .collect(),
            split,
        });
    }
    let n_ids = rows.iter().map(|(_, a, _)| a.identity + 1).max().unwrap_or(0);
    Ok(SceneSet { scenes, n_ids })
}
