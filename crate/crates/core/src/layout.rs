//! Per-host token layouts: which tokens each host holds, at which positions,
//! and under which attention mask.

use std::ops::Range;

use crate::error::{contract, Result};
use crate::tensor::MaskSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitInput {
    pub document: Vec<u32>,
    pub query: Vec<u32>,
}

/// The last `query_len` tokens are the query, the rest the document.
pub fn split_document_query(tokens: &[u32], query_len: usize) -> Result<SplitInput> {
    if query_len >= tokens.len() {
        return Err(contract(format!(
            "query length {query_len} leaves no document in {} tokens",
            tokens.len()
        )));
    }
    let (document, query) = tokens.split_at(tokens.len() - query_len);
    Ok(SplitInput {
        document: document.to_vec(),
        query: query.to_vec(),
    })
}

/// Contiguous block ranges of a length-`doc_len` document over `hosts`
/// hosts. The first `doc_len % hosts` blocks take one extra token.
pub fn block_ranges(doc_len: usize, hosts: usize) -> Result<Vec<Range<usize>>> {
    if hosts == 0 {
        return Err(contract("host count must be at least 1"));
    }
    if hosts > doc_len {
        return Err(contract(format!("{hosts} hosts for a {doc_len}-token document")));
    }
    let (base, extra) = (doc_len / hosts, doc_len % hosts);
    let mut start = 0;
    Ok((0..hosts)
        .map(|h| {
            let len = base + usize::from(h < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

pub fn split_context(document: &[u32], hosts: usize) -> Result<Vec<Vec<u32>>> {
    Ok(block_ranges(document.len(), hosts)?
        .into_iter()
        .map(|r| document[r].to_vec())
        .collect())
}

/// 1-based index of the host whose block holds document token `index`.
pub fn containing_host(doc_len: usize, hosts: usize, index: usize) -> Result<usize> {
    block_ranges(doc_len, hosts)?
        .iter()
        .position(|r| r.contains(&index))
        .map(|h| h + 1)
        .ok_or_else(|| contract(format!("document index {index} out of range {doc_len}")))
}

/// Anchor tokens for host `host` (1-based): empty on host 1, otherwise the
/// optional query followed by the first `anchor_len` document tokens.
pub fn build_anchor(
    query: &[u32],
    document: &[u32],
    anchor_len: usize,
    host: usize,
    embed_query: bool,
) -> Result<Vec<u32>> {
    if anchor_len > document.len() {
        return Err(contract(format!(
            "anchor length {anchor_len} exceeds document length {}",
            document.len()
        )));
    }
    if host <= 1 {
        return Ok(Vec::new());
    }
    let mut anchor = Vec::with_capacity(query.len() * usize::from(embed_query) + anchor_len);
    if embed_query {
        anchor.extend_from_slice(query);
    }
    anchor.extend_from_slice(&document[..anchor_len]);
    Ok(anchor)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostLayout {
    /// 1-based host index.
    pub host: usize,
    pub anchor: Vec<u32>,
    pub block: Vec<u32>,
    /// Offset of `block` inside the document.
    pub block_start: usize,
    pub anchor_positions: Vec<usize>,
    pub block_positions: Vec<usize>,
    pub embed_query: bool,
    pub has_anchor: bool,
}

impl HostLayout {
    pub fn anchor_len(&self) -> usize {
        self.anchor.len()
    }

    pub fn block_len(&self) -> usize {
        self.block.len()
    }

    pub fn tokens(&self) -> Vec<u32> {
        [self.anchor.as_slice(), &self.block].concat()
    }

    pub fn positions(&self) -> Vec<usize> {
        [self.anchor_positions.as_slice(), &self.block_positions].concat()
    }

    pub fn block_range(&self) -> Range<usize> {
        self.block_start..self.block_start + self.block.len()
    }
}

/// Anchor tokens take the starting positions `0..anchor_len`; block tokens
/// continue right after the anchor.
pub fn assign_positions(anchor_len: usize, block_len: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..anchor_len).collect(), (anchor_len..anchor_len + block_len).collect())
}

/// Layouts for every host. With `use_anchor` off no host gets an anchor.
pub fn build_host_layouts(
    input: &SplitInput,
    hosts: usize,
    anchor_len: usize,
    embed_query: bool,
    use_anchor: bool,
) -> Result<Vec<HostLayout>> {
    let ranges = block_ranges(input.document.len(), hosts)?;
    ranges
        .into_iter()
        .enumerate()
        .map(|(i, range)| {
            let host = i + 1;
            let anchor = if use_anchor {
                build_anchor(&input.query, &input.document, anchor_len, host, embed_query)?
            } else {
                Vec::new()
            };
            let (anchor_positions, block_positions) = assign_positions(anchor.len(), range.len());
            Ok(HostLayout {
                host,
                has_anchor: !anchor.is_empty(),
                anchor,
                block: input.document[range.clone()].to_vec(),
                block_start: range.start,
                anchor_positions,
                block_positions,
                embed_query: use_anchor && embed_query && host > 1,
            })
        })
        .collect()
}

/// Mask over keys `[anchor | passing | block]` for query rows
/// `[anchor | block]`: anchor rows are causal within the anchor; block rows
/// see the whole anchor, the whole passing block and the block causally.
pub fn build_apb_mask(anchor_len: usize, passing_len: usize, block_len: usize) -> MaskSpec {
    MaskSpec::apb(anchor_len, passing_len, block_len)
}
