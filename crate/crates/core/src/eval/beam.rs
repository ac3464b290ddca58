//! Length-normalized beam search over an abstract step scorer.

use crate::error::Result;

/// Supplies next-token log-probabilities for a decoding state.
pub trait Scorer {
    type State: Clone;

    /// State before the first token.
    fn start(&self) -> Result<Self::State>;

    /// Feeds `token` (or the start marker when `None`) to `state` and
    /// returns the new state with log-probabilities over the vocabulary.
    fn step(&self, state: &Self::State, token: Option<usize>) -> Result<(Self::State, Vec<f64>)>;
}

/// A finished hypothesis. `tokens` includes the end marker when one was
/// emitted; `score` is the mean log-probability over `tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

struct Live<S> {
    tokens: Vec<usize>,
    sum: f64,
    state: S,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search keeping `beam` candidates per step. Candidates ending in
/// `eos` or reaching `max_len` tokens are finished; all finished
/// hypotheses compete for the final `beam` slots. Scores are mean token
/// log-probabilities; ties prefer the lexicographically smaller sequence.
pub fn beam_search<S: Scorer>(scorer: &S, beam: usize, max_len: usize, eos: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Ok(Vec::new());
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        sum: 0.0,
        state: scorer.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        // (parent, token, sum) for every finite expansion
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (pi, hyp) in live.iter().enumerate() {
            let (state, lp) = scorer.step(&hyp.state, hyp.tokens.last().copied())?;
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((pi, tok, hyp.sum + l));
                }
            }
            states.push(state);
        }
        // equal lengths within a step, so sums rank like means
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                .then(a.1.cmp(&b.1))
        });
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (pi, tok, sum) in cands {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(tok);
            if tok == eos || tokens.len() >= max_len {
                let score = sum / tokens.len() as f64;
                finished.push(Hypothesis { tokens, score });
            } else {
                next.push(Live {
                    tokens,
                    sum,
                    state: states[pi].clone(),
                });
            }
        }
        live = next;
    }
    finished.sort_by(rank);
    finished.truncate(beam);
    Ok(finished)
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy<S: Scorer>(scorer: &S, max_len: usize, eos: usize) -> Result<Option<Hypothesis>> {
    let mut state = scorer.start()?;
    let mut tokens: Vec<usize> = Vec::new();
    let mut sum = 0.0;
    while tokens.len() < max_len {
        let (next, lp) = scorer.step(&state, tokens.last().copied())?;
        let best = lp
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .fold(None::<(usize, f64)>, |acc, (t, &l)| match acc {
                Some((_, bl)) if bl >= l => acc,
                _ => Some((t, l)),
            });
        let Some((tok, l)) = best else {
            break;
        };
        tokens.push(tok);
        sum += l;
        state = next;
        if tok == eos {
            break;
        }
    }
    Ok((!tokens.is_empty()).then(|| Hypothesis {
        score: sum / tokens.len() as f64,
        tokens,
    }))
}

/// Scores every sequence of at most `max_len` tokens that ends in `eos`
/// or has exactly `max_len` tokens, and returns the best one.
pub fn exhaustive<S: Scorer>(scorer: &S, max_len: usize, eos: usize) -> Result<Option<Hypothesis>> {
    fn walk<S: Scorer>(
        scorer: &S,
        state: &S::State,
        tokens: &mut Vec<usize>,
        sum: f64,
        max_len: usize,
        eos: usize,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        let (next, lp) = scorer.step(state, tokens.last().copied())?;
        for (tok, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            tokens.push(tok);
            let s = sum + l;
            if tok == eos || tokens.len() == max_len {
                let h = Hypothesis {
                    tokens: tokens.clone(),
                    score: s / tokens.len() as f64,
                };
                if best.as_ref().is_none_or(|b| rank(&h, b).is_lt()) {
                    *best = Some(h);
                }
            } else {
                walk(scorer, &next, tokens, s, max_len, eos, best)?;
            }
            tokens.pop();
        }
        Ok(())
    }
    let mut best = None;
    if max_len > 0 {
        walk(scorer, &scorer.start()?, &mut Vec::new(), 0.0, max_len, eos, &mut best)?;
    }
    Ok(best)
}
