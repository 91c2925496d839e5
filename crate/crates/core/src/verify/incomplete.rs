//! Certification from a single symbolic pass.

use std::time::Instant;

use crate::error::Result;
use crate::network::Network;

use super::bounds::{difference_upper, symbolic_propagate};
use super::{Query, Verdict, VerifyResult, VerifyStats};

/// Safe when every class an attacker could reach provably stays below the
/// true label's logit over the whole ball, Unknown otherwise.
pub fn certify_incomplete(net: &Network, query: &Query) -> Result<VerifyResult> {
    let start = Instant::now();
    query.check(net)?;
    let bx = query.input_box()?;
    let bounds = symbolic_propagate(net, &bx)?;
    let j = query.true_label;
    let safe = query
        .targets(net.output_dim())
        .into_iter()
        .all(|c| difference_upper(net, &bounds, &bx, c, j) < 0.0);
    Ok(VerifyResult {
        verdict: if safe { Verdict::Safe } else { Verdict::Unknown },
        stats: VerifyStats { nodes: 1, lp_calls: 0, elapsed: start.elapsed() },
    })
}
