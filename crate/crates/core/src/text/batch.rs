use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS, CLS_ID, PAD_ID, SEP, SEP_ID};
use crate::error::{Error, Result};

/// Padded id matrix with masks, all stored row-major `[batch, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    /// 1 on real tokens, 0 on padding.
    pub padding_mask: Vec<u8>,
    /// 0 up to and including the first `[SEP]`, 1 afterwards.
    pub segment_ids: Vec<u8>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn row_ids(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn keep_mask(&self) -> Vec<bool> {
        self.padding_mask.iter().map(|&m| m == 1).collect()
    }

    /// Rows `rows` of this batch, re-padded to their own longest length.
    pub fn select_rows(&self, rows: &[usize]) -> TokenBatch {
        let seq_len = rows.iter().map(|&r| self.lengths[r]).max().unwrap_or(0);
        let mut out = TokenBatch {
            batch_size: rows.len(),
            seq_len,
            ids: Vec::with_capacity(rows.len() * seq_len),
            padding_mask: Vec::with_capacity(rows.len() * seq_len),
            segment_ids: Vec::with_capacity(rows.len() * seq_len),
            lengths: Vec::with_capacity(rows.len()),
        };
        for &r in rows {
            let s = r * self.seq_len;
            out.ids.extend_from_slice(&self.ids[s..s + seq_len]);
            out.padding_mask.extend_from_slice(&self.padding_mask[s..s + seq_len]);
            out.segment_ids.extend_from_slice(&self.segment_ids[s..s + seq_len]);
            out.lengths.push(self.lengths[r]);
        }
        out
    }
}

/// Text and emoji spans of a rendered input.
fn spans(rendered: &str) -> Result<(Vec<&str>, Vec<&str>)> {
    let toks: Vec<&str> = rendered.split_whitespace().collect();
    let seps: Vec<usize> = toks
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == SEP)
        .map(|(i, _)| i)
        .collect();
    let cls_count = toks.iter().filter(|t| **t == CLS).count();
    match (toks.first(), seps.as_slice()) {
        (Some(&first), &[s1, s2]) if first == CLS && cls_count == 1 && s2 == toks.len() - 1 => {
            Ok((toks[1..s1].to_vec(), toks[s1 + 1..s2].to_vec()))
        }
        _ => Err(Error::Data(format!(
            "rendered input must look like \"[CLS] text [SEP] emojis [SEP]\": {rendered:?}"
        ))),
    }
}

/// Unpadded token count of a rendered input after truncation to `max_len`.
pub fn encoded_len(rendered: &str, max_len: usize) -> Result<usize> {
    let (text, emojis) = spans(rendered)?;
    Ok((text.len() + emojis.len() + 3).min(max_len))
}

/// Tokenizes rendered inputs by whitespace and pads every row to `max_len`.
///
/// Overlong inputs lose text tokens from the end of the text span; the
/// markers and the emoji span are kept. Only when the emoji span alone does
/// not fit is it cut as well.
pub fn encode_batch<S: AsRef<str>>(rendered: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenBatch> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3 to hold [CLS] and two [SEP], got {max_len}"
        )));
    }
    let n = rendered.len();
    let mut batch = TokenBatch {
        batch_size: n,
        seq_len: max_len,
        ids: Vec::with_capacity(n * max_len),
        padding_mask: Vec::with_capacity(n * max_len),
        segment_ids: Vec::with_capacity(n * max_len),
        lengths: Vec::with_capacity(n),
    };
    for r in rendered {
        let (text, emojis) = spans(r.as_ref())?;
        let budget = max_len - 3;
        let emoji_keep = emojis.len().min(budget);
        let text_keep = text.len().min(budget - emoji_keep);

        let start = batch.ids.len();
        batch.ids.push(CLS_ID);
        batch.ids.extend(text[..text_keep].iter().map(|t| vocab.id(t)));
        batch.ids.push(SEP_ID);
        let seg_boundary = batch.ids.len() - start;
        batch.ids.extend(emojis[..emoji_keep].iter().map(|t| vocab.id(t)));
        batch.ids.push(SEP_ID);
        let len = batch.ids.len() - start;
        batch.ids.resize(start + max_len, PAD_ID);

        batch.padding_mask.extend((0..max_len).map(|i| u8::from(i < len)));
        batch
            .segment_ids
            .extend((0..max_len).map(|i| u8::from(i >= seg_boundary && i < len)));
        batch.lengths.push(len);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::UNK_ID;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["[CLS] a b c [SEP] 😂 [SEP]"], 1).unwrap()
    }

    #[test]
    fn pads_to_max_len() {
        let b = encode_batch(&["[CLS] a [SEP] [SEP]"], &vocab(), 6).unwrap();
        assert_eq!(b.ids.len(), 6);
        assert_eq!(b.padding_mask, vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(b.segment_ids, vec![0, 0, 0, 1, 0, 0]);
        assert_eq!(b.ids[0], CLS_ID);
        assert_eq!(b.ids[4], PAD_ID);
        assert_eq!(b.lengths, vec![4]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let b = encode_batch(&["[CLS] zzz [SEP] [SEP]"], &vocab(), 4).unwrap();
        assert_eq!(b.ids[1], UNK_ID);
    }

    #[test]
    fn truncation_keeps_markers_and_emojis() {
        let v = vocab();
        let rendered = "[CLS] a b c a b c a b [SEP] 😂 😂 [SEP]";
        let max_len = 7;
        let b = encode_batch(&[rendered], &v, max_len).unwrap();
        // 3 markers + 2 emojis leave room for 2 text tokens.
        let want = vec![CLS_ID, v.id("a"), v.id("b"), SEP_ID, v.id("😂"), v.id("😂"), SEP_ID];
        assert_eq!(b.ids, want);
        assert_eq!(b.segment_ids, vec![0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(encoded_len(rendered, max_len).unwrap(), 7);
    }

    #[test]
    fn rows_begin_with_cls_and_end_with_sep() {
        let v = vocab();
        let b = encode_batch(&["[CLS] a [SEP] [SEP]", "[CLS] a b c [SEP] 😂 [SEP]"], &v, 8).unwrap();
        for i in 0..2 {
            let row = b.row_ids(i);
            assert_eq!(row[0], CLS_ID);
            assert_eq!(row[b.lengths[i] - 1], SEP_ID);
            let mask = &b.padding_mask[i * 8..(i + 1) * 8];
            for (id, m) in row.iter().zip(mask) {
                assert_eq!(*m == 1, *id != PAD_ID);
            }
        }
    }

    #[test]
    fn rejects_short_max_len_and_malformed_input() {
        assert!(encode_batch(&["[CLS] a [SEP] [SEP]"], &vocab(), 2).is_err());
        assert!(encode_batch(&["a [SEP] [SEP]"], &vocab(), 8).is_err());
        assert!(encode_batch(&["[CLS] a [SEP]"], &vocab(), 8).is_err());
    }

    #[test]
    fn select_rows_repads() {
        let v = vocab();
        let b = encode_batch(&["[CLS] a [SEP] [SEP]", "[CLS] a b c [SEP] 😂 [SEP]"], &v, 10).unwrap();
        let s = b.select_rows(&[0]);
        assert_eq!(s.seq_len, 4);
        assert_eq!(s.ids, vec![CLS_ID, v.id("a"), SEP_ID, SEP_ID]);
    }
}
