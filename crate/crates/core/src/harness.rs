//! Seeded verification batteries behind the `gradcheck` command and the
//! acceptance suite: analytic backward passes against central differences,
//! affine corner exactness, and mining-oracle style spot checks.

use crate::embed::{EmbedConfig, EmbedNet, PretrainConfig};
use crate::error::Result;
use crate::exec;
use crate::gradcheck::{central_diff, compare_gradients, triplet_probe_is_smooth};
use crate::grid::Grid2D;
use crate::pipeline;
use crate::proxy::{classification_loss, table_update, Anchor};
use crate::refine::{box_reid_loss, perturb_boxes, LossMode};
use crate::rng::Rng;
use crate::roi::{self, BBox};
use crate::synth::{SceneSet, Split, SynthConfig};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &'static str, cases: usize, worst: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            cases,
            worst,
            tolerance,
            passed: worst < tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} over {} cases: worst {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn random_image(rng: &mut Rng, rows: usize, cols: usize, c: usize) -> Grid2D {
    let data = (0..rows * cols * c).map(|_| rng.uniform()).collect();
    Grid2D::from_vec(rows, cols, c, data).expect("finite noise")
}

/// Random box at least `margin` px inside the image whose source samples
/// clear the integer lattice, so finite differences stay within one
/// interpolation cell.
fn fd_safe_box(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    h: usize,
    w: usize,
    margin: f64,
    guard: f64,
) -> BBox {
    loop {
        let m1 = rng.range(margin, cols as f64 - margin - roi::MIN_BOX_SIDE);
        let n1 = rng.range(margin, rows as f64 - margin - roi::MIN_BOX_SIDE);
        let m2 = rng.range(m1 + roi::MIN_BOX_SIDE, cols as f64 - margin);
        let n2 = rng.range(n1 + roi::MIN_BOX_SIDE, rows as f64 - margin);
        let b = BBox { m1, n1, m2, n2 };
        if let Ok(nudged) = roi::nudge_off_lattice(&b, h, w, guard) {
            if roi::lattice_clearance(&nudged, h, w).unwrap_or(0.0) > guard {
                return nudged;
            }
        }
    }
}

/// Criterion-1 style check: analytic box and image gradients of a weighted
/// crop sum against central differences with step `1e-3`.
pub fn roi_gradcheck(seed: u64, n_pairs: usize) -> CheckResult {
    let (img_n, ch, cw) = (32usize, 32usize, 16usize);
    let worsts = exec::map_indexed(n_pairs, |i| {
        let mut rng = Rng::new(seed).derive(0x101 + i as u64);
        let u = random_image(&mut rng, img_n, img_n, 3);
        let b = fd_safe_box(&mut rng, img_n, img_n, ch, cw, 4.0, 2.5e-3);
        let weights = random_image(&mut rng, ch, cw, 3);

        let crop = roi::crop_box(&u, &b, ch, cw).expect("crop");
        let (an_img, an_box) = roi::crop_backward(&crop.cache, &weights, &u).expect("backward");

        let loss_at = |img: &Grid2D, bb: &BBox| -> f64 {
            let v = roi::crop_box(img, bb, ch, cw).expect("crop").v;
            v.data()
                .iter()
                .zip(weights.data().iter())
                .map(|(a, b)| a * b)
                .sum()
        };

        let numeric_box = central_diff(
            |v: &[f64]| {
                loss_at(
                    &u,
                    &BBox {
                        m1: v[0],
                        n1: v[1],
                        m2: v[2],
                        n2: v[3],
                    },
                )
            },
            &[b.m1, b.n1, b.m2, b.n2],
            1e-3,
        )
        .expect("fd box");
        let box_report = compare_gradients(&an_box, &numeric_box, 1e-6);

        let mut img_mut = u.clone();
        let point: Vec<f64> = u.data().to_vec();
        let numeric_img = central_diff(
            |vals: &[f64]| {
                img_mut.data_mut().copy_from_slice(vals);
                loss_at(&img_mut, &b)
            },
            &point,
            1e-3,
        )
        .expect("fd image");
        let img_report = compare_gradients(an_img.data(), &numeric_img, 1e-6);

        box_report.max_rel_err.max(img_report.max_rel_err)
    });
    let worst = worsts.iter().cloned().fold(0.0, f64::max);
    CheckResult::new("roi transform gradients vs central differences", n_pairs, worst, 1e-3)
}

/// Criterion-3 style check: the affine matrix maps the normalized corners
/// onto the box corners.
pub fn affine_corner_check(seed: u64, n_boxes: usize) -> CheckResult {
    let mut rng = Rng::new(seed).derive(0xaff1);
    let mut worst = 0.0f64;
    for _ in 0..n_boxes {
        let m1 = rng.range(-100.0, 400.0);
        let n1 = rng.range(-100.0, 400.0);
        let b = BBox {
            m1,
            n1,
            m2: m1 + rng.range(2.0, 300.0),
            n2: n1 + rng.range(2.0, 300.0),
        };
        let a = roi::affine_from_box(&b).expect("valid box");
        let (x1, y1) = a.apply(-1.0, -1.0);
        let (x2, y2) = a.apply(1.0, 1.0);
        for err in [
            (x1 - b.m1).abs(),
            (y1 - b.n1).abs(),
            (x2 - b.m2).abs(),
            (y2 - b.n2).abs(),
        ] {
            worst = worst.max(err);
        }
    }
    CheckResult::new("affine corner mapping exactness", n_boxes, worst, 1e-12)
}

/// Shared fixture for the full-chain check: a small pretrained setup plus a
/// table filled with ground-truth embeddings.
pub struct ChainFixture {
    pub set: SceneSet,
    pub net: EmbedNet,
    pub table: crate::proxy::ProxyTable,
    pub items: Vec<(usize, usize, BBox)>,
}

pub fn chain_fixture(seed: u64) -> Result<ChainFixture> {
    let scfg = SynthConfig {
        n_scenes: 16,
        n_ids: 4,
        ..SynthConfig::default()
    };
    let pcfg = PretrainConfig {
        steps: 1000,
        seed,
        ..PretrainConfig::default()
    };
    let prep = pipeline::prepare(&scfg, &pcfg, (0.4, 0.7), seed)?;
    let mut table = crate::proxy::table_init(4, 2, prep.net.cfg.embed_dim)?;
    let anchors: Vec<Anchor> = prep
        .set
        .split_annotations(Split::Gallery)
        .iter()
        .chain(prep.set.split_annotations(Split::Train).iter())
        .map(|(si, ann)| {
            let crop = roi::crop_box(
                &prep.set.scenes[*si].image,
                &ann.bbox,
                prep.net.cfg.crop_h,
                prep.net.cfg.crop_w,
            )?;
            let (e, _, _) = prep.net.forward(&crop.v)?;
            Ok(Anchor {
                embedding: e.0,
                identity: ann.identity,
            })
        })
        .collect::<Result<_>>()?;
    table_update(&mut table, &anchors)?;
    let items = prep
        .items
        .iter()
        .map(|i| (i.scene, i.identity, i.gt))
        .collect();
    Ok(ChainFixture {
        set: prep.set,
        net: prep.net,
        table,
        items,
    })
}

/// Criterion-2 style check: analytic box gradient of the total re-ID loss
/// (cls+tri) against central differences. Cases are drawn until FD-safe:
/// samples off the interpolation lattice, hinge and mining away from their
/// switch points.
pub fn full_chain_gradcheck(seed: u64, n_cases: usize) -> Result<CheckResult> {
    let fx = chain_fixture(seed)?;
    let mut rng = Rng::new(seed).derive(0xc4a1);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < n_cases {
        attempts += 1;
        assert!(attempts < n_cases * 50, "ran out of FD-safe chain cases");
        let (scene_idx, identity, gt) = fx.items[attempts % fx.items.len()];
        let scene = &fx.set.scenes[scene_idx].image;
        let init = perturb_boxes(&[gt], (0.4, 0.7), &mut rng)?[0];
        let Ok(b) = roi::nudge_off_lattice(&init, fx.net.cfg.crop_h, fx.net.cfg.crop_w, 2.5e-3)
        else {
            continue;
        };
        let (_, analytic, e, skipped) =
            box_reid_loss(scene, &b, identity, &fx.net, &fx.table, 0.5, LossMode::ClsTri)?;
        if skipped || !triplet_probe_is_smooth(&fx.table, &e, identity, 0.5, 0.05) {
            continue;
        }
        let fd = |h: f64| {
            central_diff(
                |v: &[f64]| {
                    let bb = BBox {
                        m1: v[0],
                        n1: v[1],
                        m2: v[2],
                        n2: v[3],
                    };
                    box_reid_loss(scene, &bb, identity, &fx.net, &fx.table, 0.5, LossMode::ClsTri)
                        .expect("chain forward")
                        .0
                },
                &[b.m1, b.n1, b.m2, b.n2],
                h,
            )
        };
        // The probe is only a valid reference where the loss is smooth
        // across the step: a ReLU kink inside it makes the estimate
        // step-dependent, so require two step sizes to agree before
        // judging the analytic gradient against them.
        let coarse = fd(2e-4)?;
        let fine = fd(4e-5)?;
        if compare_gradients(&coarse, &fine, 1e-6).max_rel_err > 2e-3 {
            continue;
        }
        let report = compare_gradients(&analytic, &fine, 1e-6);
        worst = worst.max(report.max_rel_err);
        done += 1;
    }
    Ok(CheckResult::new(
        "full-chain re-ID loss box gradients vs central differences",
        n_cases,
        worst,
        1e-2,
    ))
}

/// Softmax cross-entropy gradient against central differences.
pub fn classification_gradcheck(seed: u64, n_cases: usize) -> CheckResult {
    let mut rng = Rng::new(seed).derive(0xce11);
    let mut worst = 0.0f64;
    for _ in 0..n_cases {
        let n = 4 + rng.index(8);
        let logits: Vec<f64> = (0..n).map(|_| rng.range(-3.0, 3.0)).collect();
        let id = rng.index(n);
        let (_, analytic) = classification_loss(&logits, id).expect("valid identity");
        let numeric = central_diff(
            |l: &[f64]| classification_loss(l, id).expect("valid identity").0,
            &logits,
            1e-5,
        )
        .expect("fd logits");
        worst = worst.max(compare_gradients(&analytic, &numeric, 1e-9).max_rel_err);
    }
    CheckResult::new("classification loss gradients vs central differences", n_cases, worst, 1e-6)
}

/// Embedding-net input and parameter gradients against central differences.
pub fn embed_gradcheck(seed: u64) -> Result<CheckResult> {
    let cfg = EmbedConfig {
        crop_h: 16,
        crop_w: 8,
        in_channels: 3,
        conv1_out: 4,
        conv2_out: 6,
        embed_dim: 12,
        n_id: 4,
    };
    let net = EmbedNet::init(cfg, &mut Rng::new(seed ^ 0xe3b));
    let mut rng = Rng::new(seed).derive(0xe3bd);
    let mut crop = random_image(&mut rng, cfg.crop_h, cfg.crop_w, 3);
    let we: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.range(-1.0, 1.0)).collect();
    let id = rng.index(cfg.n_id);

    let loss = |net: &EmbedNet, crop: &Grid2D| -> f64 {
        let (e, logits, _) = net.forward(crop).expect("forward");
        let dot: f64 = e.as_slice().iter().zip(we.iter()).map(|(a, b)| a * b).sum();
        dot + classification_loss(&logits, id).expect("id").0
    };

    let (_, logits, cache) = net.forward(&crop)?;
    let (_, dl_dlogits) = classification_loss(&logits, id)?;
    let analytic = net.backward_to_input(&cache, &we, &dl_dlogits)?;

    let mut an = Vec::new();
    let mut nu = Vec::new();
    for _ in 0..20 {
        let p = rng.index(crop.data().len());
        let orig = crop.data()[p];
        let h = 1e-5;
        crop.data_mut()[p] = orig + h;
        let plus = loss(&net, &crop);
        crop.data_mut()[p] = orig - h;
        let minus = loss(&net, &crop);
        crop.data_mut()[p] = orig;
        an.push(analytic.data()[p]);
        nu.push((plus - minus) / (2.0 * h));
    }
    let worst = compare_gradients(&an, &nu, 1e-6).max_rel_err;
    Ok(CheckResult::new(
        "embedding net input gradients vs central differences",
        20,
        worst,
        1e-3,
    ))
}

/// The full battery, in a deterministic order.
pub fn gradcheck_battery(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        affine_corner_check(seed, 1000),
        roi_gradcheck(seed, 100),
        embed_gradcheck(seed)?,
        classification_gradcheck(seed, 50),
        full_chain_gradcheck(seed, 20)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_battery_passes() {
        assert!(affine_corner_check(3, 200).passed);
    }

    #[test]
    fn roi_battery_passes_small() {
        let r = roi_gradcheck(5, 10);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn classification_battery_passes() {
        let r = classification_gradcheck(7, 20);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn battery_is_deterministic() {
        let a = roi_gradcheck(11, 5);
        let b = roi_gradcheck(11, 5);
        assert_eq!(a.worst.to_bits(), b.worst.to_bits());
    }
}
