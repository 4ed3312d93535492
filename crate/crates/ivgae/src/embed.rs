//! Unified per-sample feature vectors from mixed columns.
//!
//! Categorical cells look up a learnable scalar per category (a dedicated
//! missing token covers masked cells), get lifted to tokens and refined by
//! self-attention across the sample's categorical features, then read out
//! back to one scalar per column. Concatenating with the normalized,
//! mean-filled continuous block yields h_i of length p — one slot per
//! original column regardless of categorical cardinality. The one-hot
//! expansion is available as the ablation alternative.

use crate::config::EmbeddingConfig;
use crate::data::{ColumnStat, Dataset};
use crate::error::{Error, Result};
use crate::missing::MaskMatrix;
use crate::rng::RngState;
use crate::tensor::{NodeId, ParamStore, Tape, TapeParams, Tensor};
use crate::{data, init};

/// The missing-token slot sits after the real categories.
pub fn missing_token_index(n_categories: usize) -> usize {
    n_categories
}

/// Registers the category tables (`C_j + 1` scalars each) and, when the
/// attention stack is enabled, the lift / per-layer / read-out weights.
pub fn register_params(
    params: &mut ParamStore,
    d: &Dataset,
    cfg: &EmbeddingConfig,
    rng: &RngState,
) -> Result<()> {
    let mut init_rng = rng.stream("init-embed");
    for j in d.categorical_columns() {
        let c = d.column(j).n_categories();
        params.insert(
            &format!("embed.cat{j}.table"),
            init::uniform_half(&mut init_rng, c + 1, 1),
        )?;
    }
    if cfg.layers > 0 && !d.categorical_columns().is_empty() {
        let dt = cfg.d_tok;
        params.insert("embed.attn.lift", init::xavier(&mut init_rng, 1, dt))?;
        for l in 0..cfg.layers {
            for w in ["wq", "wk", "wv", "wo", "ff1", "ff2"] {
                params.insert(
                    &format!("embed.attn.l{l}.{w}"),
                    init::xavier(&mut init_rng, dt, dt),
                )?;
            }
        }
        params.insert("embed.attn.readout", init::xavier(&mut init_rng, dt, 1))?;
    }
    Ok(())
}

/// Contextualized categorical scalars, one row per sample, one column per
/// categorical feature (`None` when the dataset has no categorical columns).
///
/// With zero attention layers this is a pure table lookup.
pub fn embed_categorical(
    tape: &mut Tape,
    tp: &TapeParams,
    d: &Dataset,
    mask: &MaskMatrix,
    cfg: &EmbeddingConfig,
) -> Result<Option<NodeId>> {
    let cat_cols = d.categorical_columns();
    if cat_cols.is_empty() {
        return Ok(None);
    }
    let n = d.n_rows();
    let n_cat = cat_cols.len();

    // Per-column lookups, then stitch into an n×N_cat matrix.
    let mut per_col = Vec::with_capacity(n_cat);
    for &j in &cat_cols {
        let table = tp.id(&format!("embed.cat{j}.table"))?;
        let c = d.column(j).n_categories();
        let mut indices = Vec::with_capacity(n);
        for i in 0..n {
            let idx = if mask.is_observed(i, j) {
                let cat = d.category(i, j);
                if cat >= c {
                    return Err(Error::Schema(format!(
                        "cell ({i}, {j}) category {cat} outside table of {c}"
                    )));
                }
                cat
            } else {
                missing_token_index(c)
            };
            indices.push(idx);
        }
        per_col.push(tape.gather_rows(table, &indices)?);
    }
    let scalars = tape.concat(&per_col, 1)?; // n × N_cat

    if cfg.layers == 0 {
        return Ok(Some(scalars));
    }

    // Tokens: row (i·N_cat + k) carries sample i's k-th categorical scalar.
    let flat = tape.reshape(scalars, vec![n * n_cat, 1])?;
    let lift = tp.id("embed.attn.lift")?;
    let mut x = tape.matmul(flat, lift)?; // (n·N_cat) × d_tok

    let scale = 1.0 / (cfg.d_tok as f64).sqrt();
    for l in 0..cfg.layers {
        let wq = tp.id(&format!("embed.attn.l{l}.wq"))?;
        let wk = tp.id(&format!("embed.attn.l{l}.wk"))?;
        let wv = tp.id(&format!("embed.attn.l{l}.wv"))?;
        let wo = tp.id(&format!("embed.attn.l{l}.wo"))?;
        let ff1 = tp.id(&format!("embed.attn.l{l}.ff1"))?;
        let ff2 = tp.id(&format!("embed.attn.l{l}.ff2"))?;

        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;

        // Attention runs within each sample, across its categorical tokens.
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let qi = tape.slice_rows(q, i * n_cat, n_cat)?;
            let ki = tape.slice_rows(k, i * n_cat, n_cat)?;
            let vi = tape.slice_rows(v, i * n_cat, n_cat)?;
            let scores = tape.matmul_nt(qi, ki)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled)?;
            blocks.push(tape.matmul(weights, vi)?);
        }
        let attn = tape.concat(&blocks, 0)?;
        let projected = tape.matmul(attn, wo)?;
        x = tape.add(x, projected)?;

        let h1 = tape.matmul(x, ff1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, ff2)?;
        x = tape.add(x, h2)?;
    }

    let readout = tp.id("embed.attn.readout")?;
    let out = tape.matmul(x, readout)?; // (n·N_cat) × 1
    Ok(Some(tape.reshape(out, vec![n, n_cat])?))
}

/// Normalized continuous block with masked cells replaced by the column's
/// observed mean (plain data, no gradients).
pub fn continuous_block(d: &Dataset, mask: &MaskMatrix) -> Result<Tensor> {
    let cont = d.continuous_columns();
    let n = d.n_rows();
    let stats = data::observed_statistics(d, mask)?;
    let mut vals = vec![0.0; n * cont.len()];
    for (k, &j) in cont.iter().enumerate() {
        let fill = match stats[j] {
            ColumnStat::Mean(m) => m,
            ColumnStat::Mode(_) => unreachable!("continuous column"),
        };
        for i in 0..n {
            vals[i * cont.len() + k] = if mask.is_observed(i, j) {
                d.get(i, j)
            } else {
                fill
            };
        }
    }
    Tensor::new(vec![n, cont.len()], vals)
}

/// h_i = Concat(h_cat, continuous block): categorical columns first, then
/// continuous, each in schema order; total width equals the column count.
pub fn integrate(
    tape: &mut Tape,
    h_cat: Option<NodeId>,
    d: &Dataset,
    mask: &MaskMatrix,
) -> Result<NodeId> {
    let cont = continuous_block(d, mask)?;
    let has_cont = cont.shape()[1] > 0;
    match (h_cat, has_cont) {
        (Some(hc), true) => {
            let cont_node = tape.constant(cont);
            let h = tape.concat(&[hc, cont_node], 1)?;
            debug_assert_eq!(tape.shape(h), &[d.n_rows(), d.n_cols()]);
            Ok(h)
        }
        (Some(hc), false) => Ok(hc),
        (None, true) => Ok(tape.constant(cont)),
        (None, false) => Err(Error::Contract("dataset has no columns".into())),
    }
}

/// One-hot expansion of a dataset: each categorical column with C categories
/// becomes C binary slots; masked categorical cells expand to all-zero slots
/// flagged missing.
#[derive(Clone, Debug)]
pub struct OneHot {
    /// n × expanded-width values (continuous slots mean-filled when masked).
    pub matrix: Tensor,
    /// Missing flag per expanded cell (all C slots of a masked categorical
    /// cell are flagged).
    pub missing: Vec<bool>,
    /// For each expanded slot: the original column and, for categorical
    /// slots, which category the slot encodes.
    pub slot_origin: Vec<(usize, Option<usize>)>,
}

impl OneHot {
    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn is_missing(&self, i: usize, slot: usize) -> bool {
        self.missing[i * self.width() + slot]
    }
}

pub fn one_hot_encode(d: &Dataset, mask: &MaskMatrix) -> Result<OneHot> {
    mask.check_shape(d.n_rows(), d.n_cols())?;
    let n = d.n_rows();
    let mut slot_origin = Vec::new();
    for j in 0..d.n_cols() {
        if d.is_categorical(j) {
            for c in 0..d.column(j).n_categories() {
                slot_origin.push((j, Some(c)));
            }
        } else {
            slot_origin.push((j, None));
        }
    }
    let width = slot_origin.len();
    let stats = data::observed_statistics(d, mask)?;
    let mut vals = vec![0.0; n * width];
    let mut missing = vec![false; n * width];
    for (slot, &(j, cat)) in slot_origin.iter().enumerate() {
        for i in 0..n {
            let idx = i * width + slot;
            match cat {
                Some(c) => {
                    if mask.is_observed(i, j) {
                        vals[idx] = if d.category(i, j) == c { 1.0 } else { 0.0 };
                    } else {
                        vals[idx] = 0.0;
                        missing[idx] = true;
                    }
                }
                None => {
                    if mask.is_observed(i, j) {
                        vals[idx] = d.get(i, j);
                    } else {
                        vals[idx] = match stats[j] {
                            ColumnStat::Mean(m) => m,
                            ColumnStat::Mode(_) => unreachable!("continuous column"),
                        };
                        missing[idx] = true;
                    }
                }
            }
        }
    }
    Ok(OneHot {
        matrix: Tensor::new(vec![n, width], vals)?,
        missing,
        slot_origin,
    })
}

/// Expanded width law: N_num + Σ C_j.
pub fn one_hot_width(d: &Dataset) -> usize {
    d.schema()
        .iter()
        .map(|c| {
            if c.kind == crate::data::ColumnKind::Categorical {
                c.n_categories()
            } else {
                1
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EmbeddingMode;
    use crate::data::ColumnSchema;
    use crate::tensor::grad_check;

    fn toy_mixed() -> Dataset {
        // 3 samples; 2 categorical columns (3 and 2 categories), 1 continuous.
        let schema = vec![
            ColumnSchema::categorical("a", &["x", "y", "z"]),
            ColumnSchema::categorical("b", &["u", "v"]),
            ColumnSchema::continuous("c"),
        ];
        let cells = vec![
            0.0, 1.0, 0.2, //
            2.0, 0.0, 0.8, //
            1.0, 1.0, 0.5,
        ];
        Dataset::new(schema, cells, 3).unwrap()
    }

    fn full_mask(n: usize, p: usize) -> MaskMatrix {
        MaskMatrix::from_flags(vec![1; n * p], n, p).unwrap()
    }

    fn lookup_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            mode: EmbeddingMode::Hetero,
            d_tok: 4,
            layers: 0,
        }
    }

    #[test]
    fn no_categorical_columns_gives_empty_hcat() {
        let d = crate::synth::gaussian(5, 3, 1);
        let mask = full_mask(5, 3);
        let mut params = ParamStore::new();
        register_params(&mut params, &d, &lookup_cfg(), &RngState::new(0)).unwrap();
        assert!(params.is_empty());
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let h_cat = embed_categorical(&mut tape, &tp, &d, &mask, &lookup_cfg()).unwrap();
        assert!(h_cat.is_none());
        // h then equals the normalized mean-filled rows.
        let h = integrate(&mut tape, None, &d, &mask).unwrap();
        assert_eq!(tape.shape(h), &[5, 3]);
    }

    #[test]
    fn zero_layers_is_pure_lookup_and_masked_cell_changes_one_coordinate() {
        let d = toy_mixed();
        let cfg = lookup_cfg();
        let mut params = ParamStore::new();
        register_params(&mut params, &d, &cfg, &RngState::new(3)).unwrap();

        let full = full_mask(3, 3);
        // Mask sample 1's first categorical cell.
        let mut flags = vec![1u8; 9];
        flags[1 * 3 + 0] = 0;
        let masked = MaskMatrix::from_flags(flags, 3, 3).unwrap();

        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let h_full = embed_categorical(&mut tape, &tp, &d, &full, &cfg)
            .unwrap()
            .unwrap();
        let h_masked = embed_categorical(&mut tape, &tp, &d, &masked, &cfg)
            .unwrap()
            .unwrap();
        let a = tape.values(h_full);
        let b = tape.values(h_masked);
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![2], "only sample 1, column a should differ");
        // And the lookup equals the table entry directly.
        let table = params.get("embed.cat0.table").unwrap();
        assert_eq!(a[0], table.values()[0]);
        assert_eq!(b[2], table.values()[3]); // missing token of a 3-category table
    }

    #[test]
    fn width_law_p_cat_2_p_num_3() {
        let d = crate::synth::mixed(20, 3, 2, 3, 0.05, 9).unwrap();
        let mask = full_mask(20, 5);
        let cfg = EmbeddingConfig {
            d_tok: 4,
            layers: 1,
            ..lookup_cfg()
        };
        let mut params = ParamStore::new();
        register_params(&mut params, &d, &cfg, &RngState::new(4)).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let h_cat = embed_categorical(&mut tape, &tp, &d, &mask, &cfg)
            .unwrap()
            .unwrap();
        let h = integrate(&mut tape, Some(h_cat), &d, &mask).unwrap();
        assert_eq!(tape.shape(h), &[20, 5]);
    }

    #[test]
    fn masked_continuous_cell_uses_observed_mean() {
        let schema = vec![ColumnSchema::continuous("c")];
        let d = Dataset::new(schema, vec![0.2, 0.8, 0.0], 3).unwrap();
        let mask = MaskMatrix::from_flags(vec![1, 1, 0], 3, 1).unwrap();
        let block = continuous_block(&d, &mask).unwrap();
        assert_eq!(block.values(), &[0.2, 0.8, 0.5]);
    }

    #[test]
    fn missing_token_receives_gradient_when_cells_are_masked() {
        // 3×2 toy table, one masked cell per column.
        let schema = vec![
            ColumnSchema::categorical("a", &["x", "y"]),
            ColumnSchema::categorical("b", &["u", "v"]),
        ];
        let d = Dataset::new(schema, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0], 3).unwrap();
        let mask = MaskMatrix::from_flags(vec![0, 1, 1, 1, 1, 0], 3, 2).unwrap();
        let cfg = EmbeddingConfig {
            d_tok: 4,
            layers: 1,
            ..lookup_cfg()
        };
        let mut params = ParamStore::new();
        register_params(&mut params, &d, &cfg, &RngState::new(5)).unwrap();

        let report = grad_check(&params, 1e-3, 1e-4, 64, |tape, tp| {
            let h = embed_categorical(tape, tp, &d, &mask, &cfg)?.expect("has cats");
            let sq = tape.mul(h, h)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(report.passed(), "{:#?}", report.entries);

        // The missing-token rows of both tables must see nonzero gradient.
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let h = embed_categorical(&mut tape, &tp, &d, &mask, &cfg)
            .unwrap()
            .unwrap();
        let sq = tape.mul(h, h).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        for name in ["embed.cat0.table", "embed.cat1.table"] {
            let g = tape.grad(tp.id(name).unwrap()).unwrap();
            let missing_slot = g.len() - 1;
            assert!(
                g[missing_slot].abs() > 0.0,
                "{name} missing token got zero gradient"
            );
        }
    }

    #[test]
    fn lookup_mode_is_permutation_equivariant() {
        let d = toy_mixed();
        let cfg = lookup_cfg();
        let mut params = ParamStore::new();
        register_params(&mut params, &d, &cfg, &RngState::new(6)).unwrap();
        let mask = full_mask(3, 3);
        let mut tape = Tape::new();
        let tp = TapeParams::register(&mut tape, &params);
        let h = embed_categorical(&mut tape, &tp, &d, &mask, &cfg)
            .unwrap()
            .unwrap();
        let vals = tape.values(h).to_vec();

        // Reverse the sample order.
        let perm = [2usize, 1, 0];
        let mut cells = Vec::new();
        for &i in &perm {
            for j in 0..3 {
                cells.push(d.get(i, j));
            }
        }
        let d2 = Dataset::new(d.schema().to_vec(), cells, 3).unwrap();
        let mut tape2 = Tape::new();
        let tp2 = TapeParams::register(&mut tape2, &params);
        let h2 = embed_categorical(&mut tape2, &tp2, &d2, &mask, &cfg)
            .unwrap()
            .unwrap();
        let vals2 = tape2.values(h2);
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(
                &vals2[new_row * 2..new_row * 2 + 2],
                &vals[old_row * 2..old_row * 2 + 2]
            );
        }
    }

    #[test]
    fn one_hot_binary_column() {
        let schema = vec![ColumnSchema::categorical("c", &["a", "b"])];
        let d = Dataset::new(schema, vec![1.0, 0.0], 2).unwrap();
        let mask = MaskMatrix::from_flags(vec![1, 0], 2, 1).unwrap();
        let oh = one_hot_encode(&d, &mask).unwrap();
        assert_eq!(oh.width(), 2);
        // Observed category 1 of {a, b} -> [0, 1].
        assert_eq!(&oh.matrix.values()[0..2], &[0.0, 1.0]);
        assert!(!oh.is_missing(0, 0));
        // Masked cell -> [0, 0] with both slots flagged.
        assert_eq!(&oh.matrix.values()[2..4], &[0.0, 0.0]);
        assert!(oh.is_missing(1, 0) && oh.is_missing(1, 1));
    }

    #[test]
    fn one_hot_width_law() {
        let d = crate::synth::mixed(10, 3, 2, 4, 0.05, 11).unwrap();
        assert_eq!(one_hot_width(&d), 3 + 4 + 4);
        let mask = full_mask(10, 5);
        let oh = one_hot_encode(&d, &mask).unwrap();
        assert_eq!(oh.width(), 11);
    }
}
