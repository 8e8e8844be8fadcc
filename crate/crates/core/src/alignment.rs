//! The dual loop: preference construction over diverse representatives,
//! then uncertainty reduction over T_U.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::llm::{FeedbackItem, Hypothesis, LabelPair, LabelProbabilities, LlmBackend};
use crate::oracle::UserModel;
use crate::session::{Event, EventSink, Phase, Pools, ScoredStimulus, Selection, Session, Step};
use crate::stimulus::Stimulus;

/// U(τ) = 1 − |p(aligned) − p(misaligned)|, in [0, 1].
pub fn score_uncertainty(p: &LabelProbabilities) -> f64 {
    (1.0 - (p.p_aligned - p.p_misaligned).abs()).clamp(0.0, 1.0)
}

/// Someone who answers the session's prompts.
pub trait Participant {
    fn critique(&mut self, stimulus: &Stimulus, labels: &LabelPair) -> Result<FeedbackItem>;

    /// Free-text answer and whether the user now considers their view stable.
    fn respond(&mut self, hypothesis: &Hypothesis, labels: &LabelPair) -> Result<(String, bool)>;
}

/// A rule-based user whose mental model evolves through the exchanges.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedParticipant {
    pub model: UserModel,
}

impl SimulatedParticipant {
    pub fn new(model: UserModel) -> Self {
        SimulatedParticipant { model }
    }

    /// Bring a fresh model up to date with the exchanges a session already
    /// recorded.
    pub fn resume(initial: UserModel, session: &Session) -> Self {
        let answered = session.hypotheses.len() - usize::from(session.awaiting_response);
        let mut model = initial;
        for h in &session.hypotheses[..answered] {
            model = model.respond_to_hypothesis(h, &session.labels).1;
        }
        SimulatedParticipant { model }
    }
}

impl Participant for SimulatedParticipant {
    fn critique(&mut self, stimulus: &Stimulus, labels: &LabelPair) -> Result<FeedbackItem> {
        Ok(self.model.critique(stimulus, labels))
    }

    fn respond(&mut self, hypothesis: &Hypothesis, labels: &LabelPair) -> Result<(String, bool)> {
        let (text, next, stable) = self.model.respond_to_hypothesis(hypothesis, labels);
        self.model = next;
        Ok((text, stable))
    }
}

/// Score every remaining T_U stimulus against the current conversation.
/// Results come back in ascending id order whatever the evaluation order.
pub fn score_pool(session: &Session, pools: &Pools, backend: &dyn LlmBackend) -> Result<Vec<ScoredStimulus>> {
    let env_desc = session.config.env.env_description();
    session
        .uncertainty_pool
        .par_iter()
        .map(|id| {
            let encoded = pools.require(id)?.encode();
            let p = backend.query_label_probs(&env_desc, &session.conversation, &encoded, &session.labels)?;
            Ok(ScoredStimulus {
                stimulus_id: id.clone(),
                p_aligned: p.p_aligned,
                p_misaligned: p.p_misaligned,
                uncertainty: score_uncertainty(&p),
            })
        })
        .collect()
}

/// τ* = argmax U; ties go to the lowest id.
pub fn select_most_uncertain(scores: &[ScoredStimulus]) -> Option<&ScoredStimulus> {
    scores.iter().fold(None, |best: Option<&ScoredStimulus>, s| match best {
        Some(b) if b.uncertainty > s.uncertainty => Some(b),
        Some(b) if b.uncertainty == s.uncertainty && b.stimulus_id <= s.stimulus_id => Some(b),
        _ => Some(s),
    })
}

/// Perform one backend-driven step. Returns `false` when the session is
/// waiting for the user or is done.
pub fn advance_once(
    session: &mut Session,
    pools: &Pools,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<bool> {
    match session.step() {
        Step::Hypothesize => {
            let env_desc = session.config.env.env_description();
            let hypothesis = backend.generate_hypothesis(&env_desc, &session.feedback)?;
            session.commit(Event::Hypothesis { hypothesis }, sink)?;
        }
        Step::CloseLoop => {
            let stable = session.last_stable == Some(true);
            let exhausted = session.construction_loops >= session.config.max_construction_loops;
            let to = if stable || exhausted {
                Phase::Reducing
            } else {
                Phase::Constructing
            };
            session.commit(
                Event::PhaseChange {
                    from: Phase::Constructing,
                    to,
                },
                sink,
            )?;
        }
        Step::Score => {
            if session.uncertainty_pool.is_empty() || session.uncertainty_iterations >= session.config.budget {
                session.commit(done_event(), sink)?;
                return Ok(true);
            }
            let scores = match session.pending_scores.clone() {
                Some(scores) => scores,
                None => {
                    let scores = score_pool(session, pools, backend)?;
                    session.commit(Event::UncertaintyScores { scores: scores.clone() }, sink)?;
                    scores
                }
            };
            let best = select_most_uncertain(&scores)
                .map(|s| Selection {
                    stimulus_id: s.stimulus_id.clone(),
                    uncertainty: s.uncertainty,
                })
                .expect("pool is non-empty");
            if best.uncertainty < session.config.epsilon {
                session.commit(done_event(), sink)?;
            } else {
                session.commit(Event::Selection { selection: best }, sink)?;
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Run backend-driven steps until the session needs the user or is done.
pub fn advance(
    session: &mut Session,
    pools: &Pools,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<Step> {
    while advance_once(session, pools, backend, sink)? {}
    Ok(session.step())
}

fn done_event() -> Event {
    Event::PhaseChange {
        from: Phase::Reducing,
        to: Phase::Done,
    }
}

/// Answer one user-facing step. Returns `false` if the step was not for the
/// user.
fn answer(
    session: &mut Session,
    pools: &Pools,
    user: &mut dyn Participant,
    step: Step,
    sink: &mut dyn EventSink,
) -> Result<bool> {
    let event = match step {
        Step::Critique { stimulus_id } | Step::Explain { stimulus_id, .. } => {
            let stimulus = pools.require(&stimulus_id)?;
            Event::Feedback {
                item: user.critique(stimulus, &session.labels)?,
            }
        }
        Step::Respond { hypothesis } => {
            let (text, stable) = user.respond(&hypothesis, &session.labels)?;
            Event::Response { text, stable }
        }
        _ => return Ok(false),
    };
    session.commit(event, sink)?;
    Ok(true)
}

/// Critique representatives and answer hypotheses until the user is stable
/// (or the loop cap is hit); leaves the session in the reducing phase.
pub fn run_construction_loop(
    session: &mut Session,
    pools: &Pools,
    user: &mut dyn Participant,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<()> {
    if session.phase != Phase::Constructing {
        return Err(Error::Phase(format!(
            "construction loop needs the constructing phase, session is {}",
            session.phase.name()
        )));
    }
    while session.phase == Phase::Constructing {
        if advance_once(session, pools, backend, sink)? {
            continue;
        }
        let step = session.step();
        if !answer(session, pools, user, step, sink)? {
            break;
        }
    }
    Ok(())
}

/// Query the user on τ* until U(τ*) < ε, the budget is spent or T_U is
/// empty.
pub fn run_uncertainty_loop(
    session: &mut Session,
    pools: &Pools,
    user: &mut dyn Participant,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<()> {
    if session.phase != Phase::Reducing {
        return Err(Error::Phase(format!(
            "uncertainty loop needs the reducing phase, session is {}",
            session.phase.name()
        )));
    }
    while session.phase == Phase::Reducing {
        let step = advance(session, pools, backend, sink)?;
        if !answer(session, pools, user, step, sink)? {
            break;
        }
    }
    Ok(())
}

/// Both loops back to back, picking up from whichever phase the session is
/// in.
pub fn run_session(
    session: &mut Session,
    pools: &Pools,
    user: &mut dyn Participant,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<()> {
    if session.phase == Phase::Constructing {
        run_construction_loop(session, pools, user, backend, sink)?;
    }
    if session.phase == Phase::Reducing {
        run_uncertainty_loop(session, pools, user, backend, sink)?;
    }
    Ok(())
}
