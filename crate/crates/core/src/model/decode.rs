use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Next-token log-probabilities given a prefix that starts with BOS.
pub trait Scorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// A decoded caption without BOS and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, EOS included when finished.
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
struct Hyp {
    prefix: Vec<usize>,
    log_prob: f64,
}

/// Higher log-probability first, then lexicographically smaller ids.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.prefix.cmp(&b.prefix))
}

fn finish(h: Hyp, eos: usize) -> Decoded {
    let finished = h.prefix.last() == Some(&eos) && h.prefix.len() > 1;
    let end = if finished { h.prefix.len() - 1 } else { h.prefix.len() };
    Decoded {
        tokens: h.prefix[1..end].to_vec(),
        log_prob: h.log_prob,
        finished,
    }
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_with(scorer: &dyn Scorer, bos: usize, eos: usize, max_len: usize) -> Result<Decoded> {
    let mut h = Hyp {
        prefix: vec![bos],
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let lp = scorer.log_probs(&h.prefix)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        h.prefix.push(best);
        h.log_prob += lp[best];
        if best == eos {
            break;
        }
    }
    Ok(finish(h, eos))
}

/// Beam search over cumulative log-probability. Hypotheses that emit EOS
/// leave the beam; the best finished one wins, else the best unfinished one
/// at the length limit.
pub fn beam_search_with(scorer: &dyn Scorer, bos: usize, eos: usize, width: usize, max_len: usize) -> Result<Decoded> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beams = vec![Hyp {
        prefix: vec![bos],
        log_prob: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for b in &beams {
            let lp = scorer.log_probs(&b.prefix)?;
            for (tok, v) in lp.into_iter().enumerate() {
                let mut prefix = b.prefix.clone();
                prefix.push(tok);
                cands.push(Hyp {
                    prefix,
                    log_prob: b.log_prob + v,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);
        beams.clear();
        for c in cands {
            if c.prefix.last() == Some(&eos) {
                done.push(c);
            } else {
                beams.push(c);
            }
        }
        // Scores only fall as hypotheses grow.
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if beams.is_empty() || beams.iter().all(|b| b.log_prob < best_done) {
            break;
        }
    }
    done.sort_by(rank);
    if let Some(h) = done.into_iter().next() {
        return Ok(finish(h, eos));
    }
    beams.sort_by(rank);
    Ok(finish(beams.into_iter().next().expect("beam is never empty without finished hypotheses"), eos))
}
