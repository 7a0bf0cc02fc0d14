//! Ground-truth exit labels: the earliest layer at which an item's own
//! coarse embedding is the top match for its fine embedding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datagen::{comment_block, csv_rows, Corpus};
use crate::encoder::{EncoderStack, Modality};
use crate::error::{Error, Result};
use crate::numerics::cosine;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitLabel {
    pub item_id: u64,
    pub exit: usize,
}

pub fn fine_embeddings(stack: &EncoderStack, corpus: &Corpus, modality: Modality) -> Result<BTreeMap<u64, Vec<f32>>> {
    corpus
        .items
        .iter()
        .map(|it| Ok((it.item_id, stack.fine_embed(modality, it.raw(modality))?)))
        .collect()
}

/// Head outputs at every layer: `table[i][k]` is `C^i` of corpus item `k`
/// (index 0 unused). One traversal per item.
pub fn coarse_table(stack: &EncoderStack, corpus: &Corpus, modality: Modality) -> Result<Vec<Vec<Vec<f32>>>> {
    let l = stack.num_layers();
    let mut table = vec![Vec::with_capacity(corpus.len()); l + 1];
    for it in &corpus.items {
        let states = stack.trajectory(modality, it.raw(modality), l)?;
        for (layer, h) in states.iter().enumerate().skip(1) {
            table[layer].push(stack.apply_head(h)?);
        }
    }
    Ok(table)
}

/// Index of the best-scoring candidate; ties go to the smaller item id.
pub(crate) fn argmax_by_id(query: &[f32], candidates: &[Vec<f32>], ids: &[u64]) -> Result<usize> {
    let mut best: Option<(f32, u64, usize)> = None;
    for (k, c) in candidates.iter().enumerate() {
        let s = cosine(query, c)?;
        let better = match best {
            None => true,
            Some((bs, bid, _)) => s > bs || (s == bs && ids[k] < bid),
        };
        if better {
            best = Some((s, ids[k], k));
        }
    }
    best.map(|b| b.2).ok_or_else(|| Error::invalid("no candidates"))
}

/// `e(x) = min { i : argmax_x' cos(F_x, C^i_x') == x }`, falling back to
/// `L` when no layer qualifies.
pub fn label_exits(stack: &EncoderStack, corpus: &Corpus, modality: Modality) -> Result<Vec<ExitLabel>> {
    let l = stack.num_layers();
    let table = coarse_table(stack, corpus, modality)?;
    let fine = &table[l];
    let ids: Vec<u64> = corpus.items.iter().map(|it| it.item_id).collect();
    let mut exits: Vec<Option<usize>> = vec![None; corpus.len()];
    for layer in 1..=l {
        for k in 0..corpus.len() {
            if exits[k].is_none() && argmax_by_id(&fine[k], &table[layer], &ids)? == k {
                exits[k] = Some(layer);
            }
        }
        if exits.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(ids
        .iter()
        .zip(exits)
        .map(|(id, e)| ExitLabel { item_id: *id, exit: e.unwrap_or(l) })
        .collect())
}

pub fn exit_histogram(labels: &[ExitLabel]) -> Result<BTreeMap<usize, usize>> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label set"));
    }
    let mut h = BTreeMap::new();
    for l in labels {
        *h.entry(l.exit).or_insert(0) += 1;
    }
    Ok(h)
}

pub fn labels_to_csv(labels: &[ExitLabel], header: &str) -> String {
    let mut out = comment_block(header);
    out.push_str("item_id,exit\n");
    for l in labels {
        let _ = writeln!(out, "{},{}", l.item_id, l.exit);
    }
    out
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<ExitLabel>> {
    csv_rows(text, "item_id,exit")?
        .into_iter()
        .map(|(line, cols)| match cols.as_slice() {
            [id, e] => {
                let item_id = id.parse().map_err(|e| Error::Parse { line, msg: format!("item_id: {e}") })?;
                let exit: usize = e.parse().map_err(|e| Error::Parse { line, msg: format!("exit: {e}") })?;
                if exit == 0 {
                    return Err(Error::Parse { line, msg: "exit must be >= 1".into() });
                }
                Ok(ExitLabel { item_id, exit })
            }
            _ => Err(Error::Parse { line, msg: format!("expected 2 columns, got {}", cols.len()) }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CorpusConfig};
    use crate::encoder::EncoderConfig;

    fn stack() -> EncoderStack {
        EncoderStack::init(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn single_item_exits_at_first_layer() {
        let c = generate(&CorpusConfig { n: 1, ..Default::default() }).unwrap();
        let labels = label_exits(&stack(), &c, Modality::A).unwrap();
        assert_eq!(labels, vec![ExitLabel { item_id: 0, exit: 1 }]);
    }

    #[test]
    fn duplicate_items_tie_break_to_smaller_id() {
        let mut c = generate(&CorpusConfig { n: 2, ..Default::default() }).unwrap();
        c.items[1].raw_a = c.items[0].raw_a.clone();
        let labels = label_exits(&stack(), &c, Modality::A).unwrap();
        assert_eq!(labels[0].exit, 1);
        assert_eq!(labels[1].exit, 12);
    }

    #[test]
    fn fine_embeddings_are_unit_and_deterministic() {
        let s = stack();
        let c = generate(&CorpusConfig { n: 1, ..Default::default() }).unwrap();
        let f = fine_embeddings(&s, &c, Modality::A).unwrap();
        assert_eq!(f.len(), 1);
        assert!((crate::numerics::norm(&f[&0]) - 1.0).abs() < 1e-5);
        assert_eq!(f, fine_embeddings(&s, &c, Modality::A).unwrap());
        assert_eq!(f[&0], s.coarse_embed(Modality::A, 0, &c.items[0].raw_a, 12).unwrap().0);
    }

    #[test]
    fn histogram_counts() {
        let labels: Vec<_> = (0..5).map(|i| ExitLabel { item_id: i, exit: 4 }).collect();
        let h = exit_histogram(&labels).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[&4], 5);
        assert!(exit_histogram(&[]).is_err());
    }

    #[test]
    fn labels_are_order_invariant() {
        let s = stack();
        let c = generate(&CorpusConfig { n: 40, ..Default::default() }).unwrap();
        let labels = label_exits(&s, &c, Modality::A).unwrap();
        let mut rev = c.clone();
        rev.items.reverse();
        let mut back = label_exits(&s, &rev, Modality::A).unwrap();
        back.sort_by_key(|l| l.item_id);
        assert_eq!(labels, back);
    }

    #[test]
    fn labels_csv_round_trip() {
        let labels = vec![ExitLabel { item_id: 3, exit: 2 }, ExitLabel { item_id: 9, exit: 12 }];
        assert_eq!(parse_labels_csv(&labels_to_csv(&labels, "cfg")).unwrap(), labels);
        assert!(parse_labels_csv("item_id,exit\n1,0\n").is_err());
        assert!(parse_labels_csv("item,exit\n").is_err());
    }
}
