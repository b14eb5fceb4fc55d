//! Proxy triplet loss and identity classification loss.
//!
//! A proxy table holds the K most recent embeddings per labeled identity,
//! written in first-in-first-out order and zero-filled at initialization.
//! Each batch anchor mines its hardest positive from its own row and its
//! hardest negative from the other rows, then contributes a hinge
//! `[margin + D_pos - D_neg]_+` on squared Euclidean distances. Unfilled
//! slots never participate; an anchor whose own row is still empty is
//! skipped, which is how the cold-start phase after zero initialization
//! plays out.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTable {
    n_id: usize,
    k: usize,
    d: usize,
    entries: Vec<f64>,
    cursors: Vec<usize>,
    filled: Vec<bool>,
}

/// One detected sample: its embedding and labeled identity.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub embedding: Vec<f64>,
    pub identity: usize,
}

pub type TripletBatch = Vec<Anchor>;

/// Where negatives may come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeScope {
    /// Every filled slot of every other identity row.
    #[default]
    Table,
    /// Filled slots of identities present in the current batch only.
    Batch,
}

/// Slot coordinates chosen by hard mining for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinedPair {
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

/// Loss, per-anchor gradients, and the mining record.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    /// dL/d(anchor embedding); all-zero when the hinge is inactive or the
    /// anchor was skipped.
    pub grads: Vec<Vec<f64>>,
    /// Mining choice per anchor; `None` for skipped anchors.
    pub mined: Vec<Option<MinedPair>>,
    /// Indices of anchors skipped because their identity row is unfilled.
    pub skipped: Vec<usize>,
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

impl ProxyTable {
    pub fn n_id(&self) -> usize {
        self.n_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn slot(&self, id: usize, s: usize) -> &[f64] {
        let start = (id * self.k + s) * self.d;
        &self.entries[start..start + self.d]
    }

    pub fn is_filled(&self, id: usize, s: usize) -> bool {
        self.filled[id * self.k + s]
    }

    pub fn cursor(&self, id: usize) -> usize {
        self.cursors[id]
    }

    /// True once some identity has a filled slot that another identity could
    /// mine as a negative.
    pub fn any_filled(&self) -> bool {
        self.filled.iter().any(|&f| f)
    }
}

pub fn table_init(n_id: usize, k: usize, d: usize) -> Result<ProxyTable> {
    if n_id < 2 {
        return Err(Error::TooFewIdentities { n_id });
    }
    assert!(k >= 1 && d >= 1);
    Ok(ProxyTable {
        n_id,
        k,
        d,
        entries: vec![0.0; n_id * k * d],
        cursors: vec![0; n_id],
        filled: vec![false; n_id * k],
    })
}

/// Computes the proxy triplet loss for a batch against the table.
///
/// Hardest positive: the farthest filled slot of the anchor's own row.
/// Hardest negative: the closest filled slot allowed by `scope`. Ties break
/// toward the lowest (row, slot) index. Errors if an anchor that does have
/// positives finds no filled negative anywhere in scope.
pub fn mine_and_loss(
    table: &ProxyTable,
    batch: &TripletBatch,
    margin: f64,
    scope: NegativeScope,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for anchor in batch {
        if anchor.identity >= table.n_id {
            return Err(Error::InvalidIdentity {
                id: anchor.identity,
                n_id: table.n_id,
            });
        }
        debug_assert_eq!(anchor.embedding.len(), table.d);
    }

    let batch_ids: Vec<usize> = batch.iter().map(|a| a.identity).collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    let mut mined = Vec::with_capacity(batch.len());
    let mut skipped = Vec::new();

    for (idx, anchor) in batch.iter().enumerate() {
        let id = anchor.identity;
        let f = &anchor.embedding;

        // Hardest positive over the anchor's own row.
        let mut pos: Option<(usize, f64)> = None;
        for s in 0..table.k {
            if !table.is_filled(id, s) {
                continue;
            }
            let dist = squared_euclidean(f, table.slot(id, s));
            if pos.map_or(true, |(_, best)| dist > best) {
                pos = Some((s, dist));
            }
        }
        let Some((pos_slot, d_pos)) = pos else {
            skipped.push(idx);
            grads.push(vec![0.0; table.d]);
            mined.push(None);
            continue;
        };

        // Hardest negative over the allowed rows.
        let mut neg: Option<((usize, usize), f64)> = None;
        for row in 0..table.n_id {
            if row == id {
                continue;
            }
            if scope == NegativeScope::Batch && !batch_ids.contains(&row) {
                continue;
            }
            for s in 0..table.k {
                if !table.is_filled(row, s) {
                    continue;
                }
                let dist = squared_euclidean(f, table.slot(row, s));
                if neg.map_or(true, |(_, best)| dist < best) {
                    neg = Some(((row, s), dist));
                }
            }
        }
        let Some((neg_key, d_neg)) = neg else {
            return Err(Error::NoFilledNegative);
        };

        let hinge = margin + d_pos - d_neg;
        let mut grad = vec![0.0; table.d];
        if hinge > 0.0 {
            loss += hinge;
            let p = table.slot(id, pos_slot);
            let n = table.slot(neg_key.0, neg_key.1);
            for j in 0..table.d {
                grad[j] = 2.0 * (f[j] - p[j]) - 2.0 * (f[j] - n[j]);
            }
        }
        grads.push(grad);
        mined.push(Some(MinedPair {
            positive: (id, pos_slot),
            negative: neg_key,
        }));
    }

    Ok(LossValue {
        loss,
        grads,
        mined,
        skipped,
    })
}

/// FIFO write of the batch embeddings into the table, in batch order: each
/// anchor lands at its identity's cursor, which then advances modulo K.
pub fn table_update(table: &mut ProxyTable, batch: &TripletBatch) -> Result<()> {
    for anchor in batch {
        if anchor.identity >= table.n_id {
            return Err(Error::InvalidIdentity {
                id: anchor.identity,
                n_id: table.n_id,
            });
        }
        debug_assert_eq!(anchor.embedding.len(), table.d);
        let id = anchor.identity;
        let slot = table.cursors[id];
        let start = (id * table.k + slot) * table.d;
        table.entries[start..start + table.d].copy_from_slice(&anchor.embedding);
        table.filled[id * table.k + slot] = true;
        table.cursors[id] = (slot + 1) % table.k;
    }
    Ok(())
}

/// Softmax cross-entropy on identity labels with its analytic gradient
/// (softmax minus one-hot).
pub fn classification_loss(logits: &[f64], identity: usize) -> Result<(f64, Vec<f64>)> {
    if identity >= logits.len() {
        return Err(Error::InvalidIdentity {
            id: identity,
            n_id: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[identity] - max);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    grad[identity] -= 1.0;
    Ok((loss, grad))
}

const TABLE_MAGIC: &[u8; 4] = b"PTB1";

/// Writes the table as: magic "PTB1"; N_id, K, d as little-endian u32;
/// cursors as u32; the filled bitmap as one byte per slot; entries as
/// little-endian f64.
pub fn save_table(table: &ProxyTable, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TABLE_MAGIC)?;
    for v in [table.n_id as u32, table.k as u32, table.d as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &c in &table.cursors {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    for &f in &table.filled {
        w.write_all(&[f as u8])?;
    }
    for &e in &table.entries {
        w.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_table(path: &Path) -> Result<ProxyTable> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(Error::format("proxy table", "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n_id = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut cursors = Vec::with_capacity(n_id);
    for _ in 0..n_id {
        cursors.push(read_u32(&mut r)? as usize);
    }
    let mut filled = vec![0u8; n_id * k];
    r.read_exact(&mut filled)?;
    let mut entries = vec![0.0f64; n_id * k * d];
    let mut f64buf = [0u8; 8];
    for e in entries.iter_mut() {
        r.read_exact(&mut f64buf)?;
        *e = f64::from_le_bytes(f64buf);
    }
    Ok(ProxyTable {
        n_id,
        k,
        d,
        entries,
        cursors,
        filled: filled.into_iter().map(|b| b != 0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, compare_gradients};
    use crate::rng::Rng;

    fn unit_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    #[test]
    fn init_is_all_zero_and_unfilled() {
        let t = table_init(8, 2, 32).unwrap();
        assert_eq!(t.entries.len(), 8 * 2 * 32);
        assert!(t.entries.iter().all(|&v| v == 0.0));
        assert!(t.filled.iter().all(|&f| !f));
        assert_eq!(table_init(2, 1, 4).unwrap().cursors, vec![0, 0]);
    }

    #[test]
    fn single_identity_is_rejected() {
        assert!(matches!(
            table_init(1, 2, 32),
            Err(Error::TooFewIdentities { n_id: 1 })
        ));
    }

    /// Builds a table with chosen distances: the anchor is the origin-ish
    /// vector and slots are placed at controlled squared distances.
    fn hinge_case(d_pos: f64, d_neg: f64, margin: f64) -> (f64, bool) {
        let d = 4;
        let mut table = table_init(2, 1, d).unwrap();
        let anchor = vec![0.0; d];
        let pos = vec![d_pos.sqrt(), 0.0, 0.0, 0.0];
        let neg = vec![0.0, d_neg.sqrt(), 0.0, 0.0];
        table_update(
            &mut table,
            &vec![
                Anchor {
                    embedding: pos,
                    identity: 0,
                },
                Anchor {
                    embedding: neg,
                    identity: 1,
                },
            ],
        )
        .unwrap();
        let out = mine_and_loss(
            &table,
            &vec![Anchor {
                embedding: anchor,
                identity: 0,
            }],
            margin,
            NegativeScope::Table,
        )
        .unwrap();
        let active = out.grads[0].iter().any(|&g| g != 0.0);
        (out.loss, active)
    }

    #[test]
    fn inactive_hinge() {
        let (loss, active) = hinge_case(0.2, 0.9, 0.5);
        assert_eq!(loss, 0.0);
        assert!(!active);
    }

    #[test]
    fn active_hinge() {
        let (loss, active) = hinge_case(0.8, 0.4, 0.5);
        assert!((loss - 0.9).abs() < 1e-12);
        assert!(active);
    }

    /// Exhaustive enumeration over all (positive, negative) slot pairs,
    /// written independently of the mining code path.
    fn brute_force(
        table: &ProxyTable,
        anchor: &Anchor,
        margin: f64,
        scope: NegativeScope,
        batch_ids: &[usize],
    ) -> Option<(f64, MinedPair)> {
        let mut best: Option<(f64, f64, MinedPair)> = None;
        for ps in 0..table.k() {
            if !table.is_filled(anchor.identity, ps) {
                continue;
            }
            let dp = squared_euclidean(&anchor.embedding, table.slot(anchor.identity, ps));
            for row in 0..table.n_id() {
                if row == anchor.identity {
                    continue;
                }
                if scope == NegativeScope::Batch && !batch_ids.contains(&row) {
                    continue;
                }
                for ns in 0..table.k() {
                    if !table.is_filled(row, ns) {
                        continue;
                    }
                    let dn = squared_euclidean(&anchor.embedding, table.slot(row, ns));
                    let better = match &best {
                        None => true,
                        Some((bp, bn, _)) => dp - dn > bp - bn,
                    };
                    if better {
                        best = Some((
                            dp,
                            dn,
                            MinedPair {
                                positive: (anchor.identity, ps),
                                negative: (row, ns),
                            },
                        ));
                    }
                }
            }
        }
        best.map(|(dp, dn, pair)| ((margin + dp - dn).max(0.0), pair))
    }

    #[test]
    fn mining_matches_exhaustive_enumeration() {
        let mut rng = Rng::new(29);
        let (n_id, k, d) = (8, 2, 16);
        for case in 0..300 {
            let mut table = table_init(n_id, k, d).unwrap();
            // Partially fill the table, leaving some rows cold.
            let fills = rng.index(n_id * k) + 1;
            let mut fill_batch = Vec::new();
            for _ in 0..fills {
                fill_batch.push(Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: rng.index(n_id),
                });
            }
            table_update(&mut table, &fill_batch).unwrap();

            let batch: TripletBatch = (0..1 + rng.index(6))
                .map(|_| Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: rng.index(n_id),
                })
                .collect();
            let margin = rng.range(0.0, 1.0);
            let scope = if case % 2 == 0 {
                NegativeScope::Table
            } else {
                NegativeScope::Batch
            };
            let batch_ids: Vec<usize> = batch.iter().map(|a| a.identity).collect();

            let got = match mine_and_loss(&table, &batch, margin, scope) {
                Ok(v) => v,
                Err(Error::NoFilledNegative) => {
                    // Oracle must agree that some anchor had a positive but
                    // no reachable negative.
                    let agrees = batch.iter().any(|a| {
                        let has_pos =
                            (0..k).any(|s| table.is_filled(a.identity, s));
                        has_pos
                            && brute_force(&table, a, margin, scope, &batch_ids).is_none()
                    });
                    assert!(agrees, "case {case}: spurious NoFilledNegative");
                    continue;
                }
                Err(e) => panic!("case {case}: {e}"),
            };

            let mut expect_loss = 0.0;
            for (i, anchor) in batch.iter().enumerate() {
                match brute_force(&table, anchor, margin, scope, &batch_ids) {
                    None => {
                        assert!(got.mined[i].is_none(), "case {case} anchor {i}");
                        assert!(got.skipped.contains(&i));
                    }
                    Some((contrib, pair)) => {
                        expect_loss += contrib;
                        assert_eq!(got.mined[i], Some(pair), "case {case} anchor {i}");
                    }
                }
            }
            assert_eq!(got.loss, expect_loss, "case {case}");
        }
    }

    #[test]
    fn unfilled_slots_never_participate() {
        let d = 8;
        let mut rng = Rng::new(37);
        let mut table = table_init(4, 2, d).unwrap();
        // Fill only rows 0 and 1; rows 2 and 3 stay zero.
        table_update(
            &mut table,
            &vec![
                Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: 0,
                },
                Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: 1,
                },
            ],
        )
        .unwrap();
        // An anchor far from everything would mine a zero slot if they were
        // allowed: distance to zero vector is exactly 1 for unit anchors.
        let anchor = Anchor {
            embedding: unit_vec(&mut rng, d),
            identity: 0,
        };
        let out = mine_and_loss(&table, &vec![anchor], 0.5, NegativeScope::Table).unwrap();
        let pair = out.mined[0].unwrap();
        assert_eq!(pair.negative.0, 1, "negative must come from a filled row");
        // Anchors of a cold row are skipped, not matched against zeros.
        let cold = Anchor {
            embedding: unit_vec(&mut rng, d),
            identity: 2,
        };
        let out = mine_and_loss(&table, &vec![cold], 0.5, NegativeScope::Table).unwrap();
        assert_eq!(out.skipped, vec![0]);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn fifo_keeps_most_recent_k() {
        let d = 4;
        let k = 3;
        let mut table = table_init(2, k, d).unwrap();
        let mk = |v: f64| Anchor {
            embedding: vec![v; d],
            identity: 0,
        };
        for i in 0..k + 1 {
            table_update(&mut table, &vec![mk(i as f64)]).unwrap();
        }
        // Slot 0 was overwritten by the (k+1)-th write.
        let survivors: Vec<f64> = (0..k).map(|s| table.slot(0, s)[0]).collect();
        assert_eq!(survivors, vec![3.0, 1.0, 2.0]);
        assert_eq!(table.cursor(0), 1);
    }

    #[test]
    fn fifo_two_writes_then_wraparound() {
        let d = 2;
        let mut table = table_init(2, 2, d).unwrap();
        let batch = vec![
            Anchor {
                embedding: vec![1.0, 0.0],
                identity: 0,
            },
            Anchor {
                embedding: vec![0.0, 1.0],
                identity: 0,
            },
        ];
        table_update(&mut table, &batch).unwrap();
        assert!(table.is_filled(0, 0) && table.is_filled(0, 1));
        assert_eq!(table.cursor(0), 0);
        assert_eq!(table.slot(0, 0), &[1.0, 0.0]);
        table_update(
            &mut table,
            &vec![Anchor {
                embedding: vec![0.5, 0.5],
                identity: 0,
            }],
        )
        .unwrap();
        assert_eq!(table.slot(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn stored_duplicate_has_zero_self_distance() {
        let d = 8;
        let mut rng = Rng::new(43);
        let e = unit_vec(&mut rng, d);
        let mut table = table_init(2, 2, d).unwrap();
        table_update(
            &mut table,
            &vec![
                Anchor {
                    embedding: e.clone(),
                    identity: 0,
                },
                Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: 1,
                },
            ],
        )
        .unwrap();
        assert_eq!(squared_euclidean(&e, table.slot(0, 0)), 0.0);
    }

    #[test]
    fn hinge_gradient_matches_central_differences() {
        let d = 8;
        let mut rng = Rng::new(53);
        let mut checked = 0;
        while checked < 20 {
            let mut table = table_init(4, 2, d).unwrap();
            let fill: TripletBatch = (0..6)
                .map(|i| Anchor {
                    embedding: unit_vec(&mut rng, d),
                    identity: i % 4,
                })
                .collect();
            table_update(&mut table, &fill).unwrap();
            let anchor = Anchor {
                embedding: unit_vec(&mut rng, d),
                identity: rng.index(4),
            };
            let margin = 0.5;
            let out = mine_and_loss(
                &table,
                &vec![anchor.clone()],
                margin,
                NegativeScope::Table,
            )
            .unwrap();
            // Stay away from hinge and mining switch points; the FD step
            // would straddle the kink there.
            let pair = out.mined[0].unwrap();
            let dp = squared_euclidean(&anchor.embedding, table.slot(pair.positive.0, pair.positive.1));
            let dn = squared_euclidean(&anchor.embedding, table.slot(pair.negative.0, pair.negative.1));
            if (margin + dp - dn).abs() < 1e-3 {
                continue;
            }
            let numeric = central_diff(
                |f: &[f64]| {
                    let b = vec![Anchor {
                        embedding: f.to_vec(),
                        identity: anchor.identity,
                    }];
                    mine_and_loss(&table, &b, margin, NegativeScope::Table)
                        .unwrap()
                        .loss
                },
                &anchor.embedding,
                1e-5,
            )
            .unwrap();
            let report = compare_gradients(&out.grads[0], &numeric, 1e-6);
            assert!(report.passes(1e-3), "max rel err {}", report.max_rel_err);
            checked += 1;
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_when_separated() {
        let d = 4;
        let mut table = table_init(2, 1, d).unwrap();
        table_update(
            &mut table,
            &vec![
                Anchor {
                    embedding: vec![1.0, 0.0, 0.0, 0.0],
                    identity: 0,
                },
                Anchor {
                    embedding: vec![-1.0, 0.0, 0.0, 0.0],
                    identity: 1,
                },
            ],
        )
        .unwrap();
        // Anchor sits on its own proxy: D_pos = 0, D_neg = 4 >= margin.
        let out = mine_and_loss(
            &table,
            &vec![Anchor {
                embedding: vec![1.0, 0.0, 0.0, 0.0],
                identity: 0,
            }],
            0.5,
            NegativeScope::Table,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn classification_uniform_logits() {
        let n = 8;
        let (loss, _) = classification_loss(&vec![0.3; n], 2).unwrap();
        assert!((loss - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_saturated_correct() {
        let mut logits = vec![0.0; 5];
        logits[3] = 1e6;
        let (loss, _) = classification_loss(&logits, 3).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn classification_gradient_matches_central_differences() {
        let mut rng = Rng::new(59);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| rng.range(-2.0, 2.0)).collect();
            let id = rng.index(6);
            let (_, analytic) = classification_loss(&logits, id).unwrap();
            let numeric = central_diff(
                |l: &[f64]| classification_loss(l, id).unwrap().0,
                &logits,
                1e-5,
            )
            .unwrap();
            let report = compare_gradients(&analytic, &numeric, 1e-9);
            assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn classification_rejects_bad_identity() {
        assert!(classification_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn table_checkpoint_roundtrip() {
        let mut rng = Rng::new(61);
        let mut table = table_init(5, 2, 8).unwrap();
        let batch: TripletBatch = (0..7)
            .map(|i| Anchor {
                embedding: unit_vec(&mut rng, 8),
                identity: i % 5,
            })
            .collect();
        table_update(&mut table, &batch).unwrap();
        let dir = std::env::temp_dir().join("boxrefine_ptb");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ptb");
        save_table(&table, &path).unwrap();
        let back = load_table(&path).unwrap();
        assert_eq!(table, back);
    }
}
