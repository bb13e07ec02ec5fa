#![allow(dead_code)]

//! Shared helpers for the integration suites: turn generated benchmark
//! rows into encoded datasets without a disk round trip.

use autoft_core::features::{
    build_vocab, encode_instance, Domain, DomainDataset, RawRow, Schema, Split, Vocabulary,
};
use autoft_core::synth::GeneratedRow;

pub fn to_raw_rows(rows: &[GeneratedRow]) -> Vec<RawRow> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| RawRow {
            label_cell: r.label.to_string(),
            cells: {
                let mut cells = vec![r.item.clone(), r.genres.join("|")];
                cells.extend(r.ctx.iter().cloned());
                cells
            },
            row_number: i + 1,
        })
        .collect()
}

pub fn vocab_over(schema: &Schema, row_sets: &[&[GeneratedRow]]) -> Vocabulary {
    let mut raw = Vec::new();
    for rows in row_sets {
        raw.extend(to_raw_rows(rows));
    }
    build_vocab(&raw, schema, 1).expect("vocab build")
}

pub fn encode_rows(
    rows: &[GeneratedRow],
    schema: &Schema,
    vocab: &Vocabulary,
    domain: Domain,
    split: Split,
) -> DomainDataset {
    let instances = to_raw_rows(rows)
        .iter()
        .map(|r| encode_instance(r, schema, vocab).expect("encode"))
        .collect();
    DomainDataset {
        instances,
        domain,
        split,
    }
}

/// Concatenates row sets into one dataset (e.g. source+target for "All").
pub fn encode_concat(
    row_sets: &[&[GeneratedRow]],
    schema: &Schema,
    vocab: &Vocabulary,
    domain: Domain,
    split: Split,
) -> DomainDataset {
    let mut all = DomainDataset {
        instances: Vec::new(),
        domain,
        split,
    };
    for rows in row_sets {
        all.instances
            .extend(encode_rows(rows, schema, vocab, domain, split).instances);
    }
    all
}
