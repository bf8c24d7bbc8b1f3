//! Synthetic video generator.
//!
//! Scenes are built directly at the feature-map level. Each video carries
//! one tracked object (a 4x4 block of a group template) over background
//! noise, plus distractor ring patches ("clutter").
//!
//! Motion classes: the object oscillates from the grid center toward one of
//! four edge landmarks, overlapping it for one frame per period (features
//! sum where blobs overlap). Contact frames carry no ground truth and no
//! anchors, so the overlap signature exists only in memory. Inside the
//! anchor box the paired classes are identically distributed; only the
//! displacement pattern across frames differs. Odd motion pairs couple the
//! direction with a per-video phase vector mixed into the object content:
//! the label is the direction/phase product, which no linear readout of
//! convex attention outputs can separate.
//!
//! Context classes: the object is static and a ring around (never inside)
//! the anchor box carries one of the pair's patterns plus a faint copy of
//! the object template. The ring pattern is redrawn independently every
//! frame and the frame's label follows it, so the memory frames carry no
//! usable evidence and clutter rings with the same patterns (minus the
//! template glow) confound whole-frame pooling.

use super::{
    AnchorDetection, BoundingBox, Dataset, FrameRecord, GridDims, GroundTruthAction, Manifest,
    Split, VideoEntry,
};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Object side length in grid cells.
const OBJ: usize = 4;
/// Landmark side length.
const LM: usize = 2;
/// Frames between successive landmark contacts.
const BOUNCE_PERIOD: usize = 6;
/// Offsets from the center position over one period. Slot 0 is the contact
/// leap; the other slots keep the box at least two cells clear of the
/// landmark so pooled anchor features never read landmark content.
const BOUNCE_OFFSETS: [i64; BOUNCE_PERIOD] = [6, 2, 1, 0, 1, 2];
/// Chance that a period's contact is skipped (the object stops short).
/// Windows without any contact are genuinely ambiguous instances.
const CONTACT_SKIP_PROB: f64 = 0.35;
/// Ring patches sit at exactly this Chebyshev distance from the box, which
/// keeps them outside the bilinear reach of jittered anchor boxes.
const RING_GAP: i64 = 2;

const BG_SIGMA: f64 = 0.55;
const JITTER_SIGMA: f64 = 0.40;
const TEMPLATE_NORM: f64 = 2.2;
const LANDMARK_NORM: f64 = 2.4;
const RING_NORM: f64 = 1.9;
const PHASE_NORM: f64 = 1.8;
const GLOW_SCALE: f64 = 0.6;
const ANCHORS_PER_GT: usize = 3;
const ANCHOR_JITTER: f64 = 0.5;
const CLUTTER_PER_FRAME: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub num_classes: usize,
    pub grid: GridDims,
    /// Class pairs separable only through cross-frame displacement.
    pub motion_classes: Vec<(usize, usize)>,
    /// Class pairs separable only through the pattern around the box.
    pub context_classes: Vec<(usize, usize)>,
    pub seed: u64,
}

/// The dataset the ablation and confidence acceptance runs are built on.
pub fn default_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_videos: 48,
        frames_per_video: 24,
        num_classes: 8,
        grid: GridDims { c: 16, h: 16, w: 16 },
        motion_classes: vec![(0, 1), (2, 3)],
        context_classes: vec![(4, 5), (6, 7)],
        seed,
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.frames_per_video == 0 || self.num_videos == 0 {
            return Err(Error::config("need at least one video and one frame"));
        }
        if !self.motion_classes.is_empty() && self.frames_per_video < 2 {
            return Err(Error::config(
                "motion classes are undecidable with a single frame per video",
            ));
        }
        let mut seen = vec![false; self.num_classes];
        for &(a, b) in self.motion_classes.iter().chain(&self.context_classes) {
            for c in [a, b] {
                if c >= self.num_classes {
                    return Err(Error::config(format!(
                        "pair class {c} out of range for {} classes",
                        self.num_classes
                    )));
                }
                if seen[c] {
                    return Err(Error::config(format!("class {c} appears in two pairs")));
                }
                seen[c] = true;
            }
            if a == b {
                return Err(Error::config("a pair needs two distinct classes"));
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::config(
                "every class must belong to a motion or context pair to be reachable",
            ));
        }
        let groups = self.motion_classes.len() * 2 + self.context_classes.len();
        if self.num_videos < groups {
            return Err(Error::config(format!(
                "{} videos cannot cover {groups} video groups",
                self.num_videos
            )));
        }
        let (c, h, w) = (self.grid.c, self.grid.h, self.grid.w);
        let min_hw = if self.motion_classes.is_empty() { 12 } else { 16 };
        if c < 4 || h < min_hw || w < min_hw {
            return Err(Error::config(format!(
                "grid {c}x{h}x{w} too small to host a box plus context (need C >= 4, H and W >= {min_hw})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone)]
enum VideoPlan {
    Motion {
        class: usize,
        group: usize,
        axis: Axis,
        /// +1 moves toward the right/bottom landmark.
        direction: i64,
        /// Phase sign mixed into the object content; 0 for plain pairs.
        phase: i64,
    },
    Context {
        pair: (usize, usize),
        group: usize,
    },
}

/// Per-dataset random content vectors (unit direction times a fixed norm).
struct PatternSet {
    templates: Vec<Vec<f64>>,
    /// left, right, top, bottom.
    landmarks: [Vec<f64>; 4],
    /// Ring pattern per class id (only context classes are present).
    rings: Vec<Option<Vec<f64>>>,
    phase: Vec<f64>,
}

fn unit_pattern(c: usize, norm: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..c).map(|_| gauss.sample(rng)).collect();
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    for x in &mut v {
        *x *= norm / len;
    }
    v
}

impl PatternSet {
    fn draw(spec: &SyntheticSpec) -> Self {
        let mut rng = stream_rng(spec.seed, "patterns");
        let c = spec.grid.c;
        let num_groups = spec.motion_classes.len() + spec.context_classes.len();
        let templates = (0..num_groups)
            .map(|_| unit_pattern(c, TEMPLATE_NORM, &mut rng))
            .collect();
        let landmarks = [
            unit_pattern(c, LANDMARK_NORM, &mut rng),
            unit_pattern(c, LANDMARK_NORM, &mut rng),
            unit_pattern(c, LANDMARK_NORM, &mut rng),
            unit_pattern(c, LANDMARK_NORM, &mut rng),
        ];
        let mut rings = vec![None; spec.num_classes];
        for &(a, b) in &spec.context_classes {
            rings[a] = Some(unit_pattern(c, RING_NORM, &mut rng));
            rings[b] = Some(unit_pattern(c, RING_NORM, &mut rng));
        }
        let phase = unit_pattern(c, PHASE_NORM, &mut rng);
        PatternSet {
            templates,
            landmarks,
            rings,
            phase,
        }
    }
}

/// Group ordering: motion pairs first, then context pairs.
fn group_of_class(spec: &SyntheticSpec, class: usize) -> usize {
    for (i, &(a, b)) in spec.motion_classes.iter().enumerate() {
        if class == a || class == b {
            return i;
        }
    }
    for (i, &(a, b)) in spec.context_classes.iter().enumerate() {
        if class == a || class == b {
            return spec.motion_classes.len() + i;
        }
    }
    unreachable!("validated specs cover every class")
}

/// Expands the plan cycle: one slot per motion class, two per context pair
/// (context videos host both classes, so they get twice the share).
fn plan_cycle(spec: &SyntheticSpec) -> Vec<VideoPlan> {
    let mut cycle = Vec::new();
    for (i, &(a, b)) in spec.motion_classes.iter().enumerate() {
        let axis = if i % 2 == 0 {
            Axis::Horizontal
        } else {
            Axis::Vertical
        };
        let coupled = i % 2 == 1;
        for &class in &[a, b] {
            cycle.push(VideoPlan::Motion {
                class,
                group: group_of_class(spec, class),
                axis,
                // For phase-coupled pairs the direction is filled per video.
                direction: if class == a { 1 } else { -1 },
                phase: if coupled { i64::MAX } else { 0 },
            });
        }
    }
    for (i, &pair) in spec.context_classes.iter().enumerate() {
        let group = spec.motion_classes.len() + i;
        cycle.push(VideoPlan::Context { pair, group });
        cycle.push(VideoPlan::Context { pair, group });
    }
    cycle
}

struct MapBuilder {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl MapBuilder {
    fn noise(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let gauss = Normal::new(0.0, BG_SIGMA).unwrap();
        let data = (0..c * h * w).map(|_| gauss.sample(rng)).collect();
        MapBuilder { c, h, w, data }
    }

    /// Adds `content` to every cell of a block; overlapping writes sum.
    fn add_block(&mut self, row: i64, col: i64, side: usize, content: &[f64]) {
        for r in row..row + side as i64 {
            for cl in col..col + side as i64 {
                self.add_cell(r, cl, content);
            }
        }
    }

    fn add_cell(&mut self, row: i64, col: i64, content: &[f64]) {
        if row < 0 || col < 0 || row >= self.h as i64 || col >= self.w as i64 {
            return;
        }
        let (r, cl) = (row as usize, col as usize);
        for ch in 0..self.c {
            self.data[ch * self.h * self.w + r * self.w + cl] += content[ch];
        }
    }

    /// Adds `content` on the cells at exactly Chebyshev distance `gap`
    /// from the object block.
    fn add_ring(&mut self, obj_row: i64, obj_col: i64, gap: i64, content: &[f64]) {
        for r in obj_row - gap..obj_row + OBJ as i64 + gap {
            for cl in obj_col - gap..obj_col + OBJ as i64 + gap {
                let dr = (obj_row - r).max(r - (obj_row + OBJ as i64 - 1)).max(0);
                let dc = (obj_col - cl).max(cl - (obj_col + OBJ as i64 - 1)).max(0);
                if dr.max(dc) == gap {
                    self.add_cell(r, cl, content);
                }
            }
        }
    }

    fn finish(self) -> Result<Tensor<f64>> {
        Tensor::new(vec![self.c, self.h, self.w], self.data)
    }
}

fn jittered(pattern: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let gauss = Normal::new(0.0, JITTER_SIGMA).unwrap();
    pattern.iter().map(|&v| v + gauss.sample(rng)).collect()
}

fn mixed(a: &[f64], b: &[f64], sign: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| x + sign * y).collect()
}

/// Landmark block origins: left, right, top, bottom edge midpoints.
fn landmark_origins(h: usize, w: usize) -> [(i64, i64); 4] {
    let mid_r = (h / 2 - 1) as i64;
    let mid_c = (w / 2 - 1) as i64;
    [
        (mid_r, 0),
        (mid_r, (w - LM) as i64),
        (0, mid_c),
        ((h - LM) as i64, mid_c),
    ]
}

/// Center origin of the tracked object.
fn center_origin(h: usize, w: usize) -> (i64, i64) {
    ((h / 2 - OBJ / 2) as i64, (w / 2 - OBJ / 2) as i64)
}

fn clamp_box(mut b: BoundingBox, h: f64, w: f64) -> BoundingBox {
    if b.x1 < 0.0 {
        b.x2 -= b.x1;
        b.x1 = 0.0;
    }
    if b.y1 < 0.0 {
        b.y2 -= b.y1;
        b.y1 = 0.0;
    }
    if b.x2 > w {
        b.x1 -= b.x2 - w;
        b.x2 = w;
    }
    if b.y2 > h {
        b.y1 -= b.y2 - h;
        b.y2 = h;
    }
    b
}

fn emit_anchors(
    gt: &BoundingBox,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Vec<AnchorDetection> {
    (0..ANCHORS_PER_GT)
        .map(|_| {
            let dx = rng.gen_range(-ANCHOR_JITTER..ANCHOR_JITTER);
            let dy = rng.gen_range(-ANCHOR_JITTER..ANCHOR_JITTER);
            let bbox = clamp_box(
                BoundingBox {
                    x1: gt.x1 + dx,
                    y1: gt.y1 + dy,
                    x2: gt.x2 + dx,
                    y2: gt.y2 + dy,
                },
                h as f64,
                w as f64,
            );
            AnchorDetection {
                bbox,
                score: rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

/// Ring patch positions whose cells stay clear of a protected region.
fn place_clutter(
    h: usize,
    w: usize,
    protected: &[(i64, i64, i64, i64)],
    rng: &mut impl Rng,
) -> Option<(i64, i64)> {
    for _ in 0..30 {
        let r = rng.gen_range(RING_GAP..(h as i64 - OBJ as i64 - RING_GAP));
        let c = rng.gen_range(RING_GAP..(w as i64 - OBJ as i64 - RING_GAP));
        let candidate = (
            r - RING_GAP,
            c - RING_GAP,
            r + OBJ as i64 + RING_GAP,
            c + OBJ as i64 + RING_GAP,
        );
        let clear = protected.iter().all(|&(r1, c1, r2, c2)| {
            candidate.2 <= r1 || candidate.0 >= r2 || candidate.3 <= c1 || candidate.1 >= c2
        });
        if clear {
            return Some((r, c));
        }
    }
    None
}

/// Generates the full dataset described by `spec`. Identical specs produce
/// identical datasets byte for byte.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let patterns = PatternSet::draw(spec);
    let (c, h, w) = (spec.grid.c, spec.grid.h, spec.grid.w);
    let cycle = plan_cycle(spec);
    let all_ring_patterns: Vec<Vec<f64>> =
        patterns.rings.iter().flatten().cloned().collect();

    // Group counters drive the split; per-class counters alternate the
    // phase sign so each class sees both phases equally.
    let mut group_counts = vec![0usize; spec.motion_classes.len() + spec.context_classes.len()];
    let mut class_counts = vec![0usize; spec.num_classes];
    let mut videos = Vec::new();
    let mut frames = Vec::new();

    for vid_idx in 0..spec.num_videos {
        let plan = &cycle[vid_idx % cycle.len()];
        let video_id = format!("v{vid_idx:03}");
        let mut rng = stream_rng(spec.seed, &format!("video/{vid_idx}"));
        let group = match plan {
            VideoPlan::Motion { group, .. } => *group,
            VideoPlan::Context { group, .. } => *group,
        };
        let position = group_counts[group];
        group_counts[group] += 1;
        let split = if position % 3 == 2 {
            Split::Test
        } else {
            Split::Train
        };
        let class_position = match plan {
            VideoPlan::Motion { class, .. } => {
                let p = class_counts[*class];
                class_counts[*class] += 1;
                p
            }
            VideoPlan::Context { .. } => position,
        };

        let (center_r, center_c) = center_origin(h, w);
        let lm = landmark_origins(h, w);

        // Context objects sit at a random spot with room for the ring.
        let ctx_origin = (
            rng.gen_range(RING_GAP..(h as i64 - OBJ as i64 - RING_GAP)),
            rng.gen_range(RING_GAP..(w as i64 - OBJ as i64 - RING_GAP)),
        );
        // Which bounce periods actually reach the landmark.
        let periods = spec.frames_per_video / BOUNCE_PERIOD + 1;
        let contact_reached: Vec<bool> = (0..periods)
            .map(|_| rng.gen_bool(1.0 - CONTACT_SKIP_PROB))
            .collect();
        // Phase-coupled motion videos alternate the phase sign per video
        // of the same class, keeping the crop marginals identical across
        // the pair.
        let phase_sign = if class_position % 2 == 0 { 1.0 } else { -1.0 };

        for t in 1..=spec.frames_per_video {
            let mut map = MapBuilder::noise(c, h, w, &mut rng);
            let mut protected: Vec<(i64, i64, i64, i64)> = Vec::new();
            let mut gts: Vec<GroundTruthAction> = Vec::new();

            match plan {
                VideoPlan::Motion {
                    class,
                    group,
                    axis,
                    direction,
                    phase,
                } => {
                    for (i, origin) in lm.iter().enumerate() {
                        map.add_block(origin.0, origin.1, LM, &patterns.landmarks[i]);
                        protected.push((
                            origin.0 - 1,
                            origin.1 - 1,
                            origin.0 + LM as i64 + 1,
                            origin.1 + LM as i64 + 1,
                        ));
                    }

                    let coupled = *phase == i64::MAX;
                    // For coupled pairs the label is the direction/phase
                    // product: positive class moves with its phase sign.
                    let dir = if coupled {
                        (*direction as f64 * phase_sign) as i64
                    } else {
                        *direction
                    };
                    let slot = (t - 1) % BOUNCE_PERIOD;
                    let period = (t - 1) / BOUNCE_PERIOD;
                    let contact = slot == 0 && contact_reached[period];
                    let offset = if slot == 0 && !contact {
                        BOUNCE_OFFSETS[1]
                    } else {
                        BOUNCE_OFFSETS[slot]
                    };
                    let (obj_r, obj_c) = match axis {
                        Axis::Horizontal => (center_r, center_c + dir * offset),
                        Axis::Vertical => (center_r + dir * offset, center_c),
                    };

                    let base = &patterns.templates[*group];
                    let content = if coupled {
                        jittered(&mixed(base, &patterns.phase, phase_sign), &mut rng)
                    } else {
                        jittered(base, &mut rng)
                    };
                    map.add_block(obj_r, obj_c, OBJ, &content);
                    // Protect the whole travel corridor so clutter can
                    // never collide with any object position.
                    let reach = BOUNCE_OFFSETS[0];
                    let (corr_r, corr_c) = match axis {
                        Axis::Horizontal => (center_r, center_c - reach),
                        Axis::Vertical => (center_r - reach, center_c),
                    };
                    let (corr_h, corr_w) = match axis {
                        Axis::Horizontal => (OBJ as i64, OBJ as i64 + 2 * reach),
                        Axis::Vertical => (OBJ as i64 + 2 * reach, OBJ as i64),
                    };
                    protected.push((
                        corr_r - RING_GAP - 1,
                        corr_c - RING_GAP - 1,
                        corr_r + corr_h + RING_GAP + 1,
                        corr_c + corr_w + RING_GAP + 1,
                    ));

                    // Contact frames are occluded: the detector reports
                    // nothing and no action is annotated, so the overlap
                    // signature lives only in the memory features.
                    if !contact {
                        gts.push(GroundTruthAction {
                            bbox: BoundingBox::new(
                                obj_c as f64,
                                obj_r as f64,
                                (obj_c + OBJ as i64) as f64,
                                (obj_r + OBJ as i64) as f64,
                            )?,
                            class_id: *class,
                        });
                    }
                }
                VideoPlan::Context { pair, group } => {
                    let (obj_r, obj_c) = ctx_origin;
                    let base = &patterns.templates[*group];
                    let content = jittered(base, &mut rng);
                    map.add_block(obj_r, obj_c, OBJ, &content);

                    // The frame's class follows the ring pattern drawn this
                    // frame; past rings are independent of the current one.
                    let class = if rng.gen_bool(0.5) { pair.0 } else { pair.1 };
                    let ring_pattern = patterns.rings[class].as_ref().unwrap();
                    let glow: Vec<f64> = base.iter().map(|&v| v * GLOW_SCALE).collect();
                    let ring = jittered(&mixed(ring_pattern, &glow, 1.0), &mut rng);
                    map.add_ring(obj_r, obj_c, RING_GAP, &ring);
                    protected.push((
                        obj_r - RING_GAP - 1,
                        obj_c - RING_GAP - 1,
                        obj_r + OBJ as i64 + RING_GAP + 1,
                        obj_c + OBJ as i64 + RING_GAP + 1,
                    ));

                    gts.push(GroundTruthAction {
                        bbox: BoundingBox::new(
                            obj_c as f64,
                            obj_r as f64,
                            (obj_c + OBJ as i64) as f64,
                            (obj_r + OBJ as i64) as f64,
                        )?,
                        class_id: class,
                    });
                }
            }

            if !all_ring_patterns.is_empty() {
                // Distractor rings around nothing. Context videos draw from
                // their own pair's patterns for maximal pooling confusion.
                for _ in 0..CLUTTER_PER_FRAME {
                    if let Some((r, cl)) = place_clutter(h, w, &protected, &mut rng) {
                        let pattern = match plan {
                            VideoPlan::Context { pair, .. } => {
                                let pick = if rng.gen_bool(0.5) { pair.0 } else { pair.1 };
                                patterns.rings[pick].as_ref().unwrap().clone()
                            }
                            VideoPlan::Motion { .. } => {
                                let i = rng.gen_range(0..all_ring_patterns.len());
                                all_ring_patterns[i].clone()
                            }
                        };
                        let content = jittered(&pattern, &mut rng);
                        map.add_ring(r, cl, RING_GAP, &content);
                        protected.push((
                            r - RING_GAP,
                            cl - RING_GAP,
                            r + OBJ as i64 + RING_GAP,
                            cl + OBJ as i64 + RING_GAP,
                        ));
                    }
                }
            }

            let mut anchors = Vec::new();
            for gt in &gts {
                anchors.extend(emit_anchors(&gt.bbox, h, w, &mut rng));
            }

            frames.push(FrameRecord {
                video_id: video_id.clone(),
                t,
                feature_map: map.finish()?,
                anchors,
                ground_truth: gts,
            });
        }

        videos.push(VideoEntry {
            id: video_id,
            frames: spec.frames_per_video,
            split,
        });
    }

    let class_names = class_name_table(spec);
    let manifest = Manifest {
        grid: spec.grid.clone(),
        num_classes: spec.num_classes,
        class_names,
        image_to_grid_scale: 1.0,
        videos,
        generator: Some(serde_json::to_value(spec).map_err(|e| Error::validation(e.to_string()))?),
    };
    frames.sort_by(|a, b| (a.video_id.as_str(), a.t).cmp(&(b.video_id.as_str(), b.t)));
    Ok(Dataset { manifest, frames })
}

fn class_name_table(spec: &SyntheticSpec) -> Vec<String> {
    let mut names = vec![String::new(); spec.num_classes];
    for (i, &(a, b)) in spec.motion_classes.iter().enumerate() {
        names[a] = format!("motion{i}_pos");
        names[b] = format!("motion{i}_neg");
    }
    for (i, &(a, b)) in spec.context_classes.iter().enumerate() {
        names[a] = format!("context{i}_a");
        names[b] = format!("context{i}_b");
    }
    names
}
