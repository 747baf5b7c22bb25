//! Linear softmax policy over the candidate actions of a state.
//!
//! Feature layout (`D = 26`): one-hot action kind (16), one-hot role of the
//! targeted element (5), then `overlap`, `repeat`, `next`, `progress` and a
//! bias.
//!
//! * `overlap`: for element actions, the share of the label's words found in
//!   the query; for `Type`, 1 when the query names the snippet right after a
//!   word of the focused field's label; for scrolls, 1 when the list can move
//!   that way.
//! * `repeat`: the element's label was already acted on, the same text was
//!   already typed, or the scroll reverses the previous scroll on this screen.
//! * `next`: the element is the earliest-mentioned one in the query among the
//!   screen's elements whose whole label the query contains and that were not
//!   acted on yet; for
//!   `Type`, the slot match of a text not typed yet.
//! * `progress`: `step / max_steps`, on `Finished` and `CallUser` only.

use std::collections::BTreeSet;

use rand::Rng;

use crate::action::{Action, ActionKind};
use crate::env::{scroll_direction, Observation, Role};
use crate::params::{ParamError, ParameterMap};
use crate::util::words;

pub const N_KINDS: usize = 16;
pub const N_ROLES: usize = 5;
pub const OVERLAP: usize = N_KINDS + N_ROLES;
pub const REPEAT: usize = OVERLAP + 1;
pub const NEXT: usize = OVERLAP + 2;
pub const PROGRESS: usize = OVERLAP + 3;
pub const BIAS: usize = OVERLAP + 4;
pub const D: usize = BIAS + 1;

/// Name of the weight vector inside a [`ParameterMap`].
pub const WEIGHTS: &str = "policy.weights";

pub type Features = [f64; D];

/// Zero weights: the uniform policy.
pub fn init_params() -> ParameterMap {
    ParameterMap::new()
        .with(WEIGHTS, vec![D], vec![0.0; D])
        .expect("consistent shape")
}

/// Borrow the weight vector, checking its shape.
pub fn weights(params: &ParameterMap) -> Result<&[f64], ParamError> {
    let t = params.get(WEIGHTS)?;
    if t.shape != [D] {
        return Err(ParamError::Mismatch(format!(
            "`{WEIGHTS}` has shape {:?}, expected [{D}]",
            t.shape
        )));
    }
    Ok(&t.data)
}

pub fn params_from(theta: &[f64]) -> ParameterMap {
    ParameterMap::new()
        .with(WEIGHTS, vec![D], theta.to_vec())
        .expect("consistent shape")
}

fn is_click_like(a: &Action) -> bool {
    matches!(
        a,
        Action::Click(_) | Action::LongPress(_) | Action::DoubleClick(_) | Action::Hover(_)
    )
}

fn slot_match(query: &[String], snippet: &str, field_label: &str) -> bool {
    let snip = words(snippet);
    if snip.is_empty() {
        return false;
    }
    let label: BTreeSet<String> = words(field_label).into_iter().collect();
    (0..query.len()).any(|i| {
        query[i..].starts_with(&snip)
            && query[i.saturating_sub(2)..i]
                .iter()
                .any(|w| label.contains(w))
    })
}

/// Whether a click-like action already targeted an element with this label.
fn acted_on(obs: &Observation, label: &str) -> bool {
    obs.history
        .iter()
        .any(|h| h.target.as_deref() == Some(label) && h.action.as_ref().is_some_and(is_click_like))
}

/// Index of the first query word of `label`, when the query contains all of its words.
fn mention(query: &[String], label: &str) -> Option<usize> {
    let label: BTreeSet<String> = words(label).into_iter().collect();
    if label.is_empty() || !label.iter().all(|w| query.contains(w)) {
        return None;
    }
    query.iter().position(|w| label.contains(w))
}

/// Earliest mention among elements on screen that were not acted on yet.
fn earliest_pending(obs: &Observation, query: &[String]) -> Option<usize> {
    obs.screen
        .elements
        .iter()
        .filter(|e| !acted_on(obs, &e.label))
        .filter_map(|e| mention(query, &e.label))
        .min()
}

fn flag(b: bool) -> f64 {
    f64::from(u8::from(b))
}

/// Feature vector of `action` in the observed state.
pub fn features(obs: &Observation, action: &Action) -> Features {
    let mut f = [0.0; D];
    f[action.kind().index()] = 1.0;
    f[BIAS] = 1.0;
    let query = words(&obs.query);
    let qset: BTreeSet<String> = query.iter().cloned().collect();
    let screen = &obs.screen;
    match action {
        a if is_click_like(a) => {
            if let Some(el) = a.point().and_then(|p| screen.element_at(p)) {
                f[N_KINDS + el.role.index()] = 1.0;
                f[OVERLAP] = crate::util::label_overlap(&el.label, &qset);
                let seen = acted_on(obs, &el.label);
                f[REPEAT] = flag(seen);
                let pos = mention(&query, &el.label);
                f[NEXT] = flag(!seen && pos.is_some() && pos == earliest_pending(obs, &query));
            }
        }
        Action::Type(text) => {
            let slot = screen
                .focused()
                .is_some_and(|field| slot_match(&query, text, &field.label));
            let typed = obs
                .history
                .iter()
                .any(|h| h.action.as_ref() == Some(action));
            f[OVERLAP] = flag(slot);
            f[REPEAT] = flag(typed);
            f[NEXT] = flag(slot && !typed);
        }
        Action::Scroll(s) => {
            if let (Some(dir), Some(list)) = (scroll_direction(s), screen.list) {
                f[OVERLAP] = flag(list.can_scroll(dir));
                let last = obs.history.iter().rev().find_map(|h| match &h.action {
                    Some(Action::Scroll(prev)) if h.screen_id == screen.screen_id => {
                        scroll_direction(prev)
                    }
                    _ => None,
                });
                f[REPEAT] = flag(last.is_some_and(|l| l != dir));
            }
        }
        Action::Finished(_) | Action::CallUser(_) => {
            f[PROGRESS] = obs.step as f64 / obs.max_steps.max(1) as f64;
        }
        _ => {}
    }
    f
}

/// Per-state feature rows for a fixed candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures {
    pub rows: Vec<Features>,
}

impl StateFeatures {
    pub fn new(obs: &Observation, candidates: &[Action]) -> Self {
        Self {
            rows: candidates.iter().map(|a| features(obs, a)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn logits(&self, theta: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot(theta, r)).collect()
    }

    /// Softmax probabilities, stabilized by subtracting the largest logit.
    pub fn probs(&self, theta: &[f64]) -> Vec<f64> {
        softmax(&self.logits(theta))
    }

    pub fn log_probs(&self, theta: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(theta))
    }

    /// `E_pi[phi]`.
    pub fn mean_features(&self, probs: &[f64]) -> Features {
        let mut m = [0.0; D];
        for (p, r) in probs.iter().zip(&self.rows) {
            for (mi, ri) in m.iter_mut().zip(r) {
                *mi += p * ri;
            }
        }
        m
    }

    /// `phi(chosen) - E_pi[phi]`.
    pub fn grad_log_prob(&self, theta: &[f64], chosen: usize) -> Features {
        let mean = self.mean_features(&self.probs(theta));
        let mut g = self.rows[chosen];
        for (gi, mi) in g.iter_mut().zip(mean) {
            *gi -= mi;
        }
        g
    }

    pub fn entropy(&self, theta: &[f64]) -> f64 {
        let lp = self.log_probs(theta);
        -lp.iter().map(|l| l.exp() * l).sum::<f64>()
    }

    /// `dH/dtheta = -sum_a p_a (phi_a - phi_bar) log p_a`.
    pub fn entropy_grad(&self, theta: &[f64]) -> Features {
        let lp = self.log_probs(theta);
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let mean = self.mean_features(&p);
        let mut g = [0.0; D];
        for ((r, pa), la) in self.rows.iter().zip(&p).zip(&lp) {
            for k in 0..D {
                g[k] -= pa * (r[k] - mean[k]) * la;
            }
        }
        g
    }

    /// `KL(pi_theta || pi_ref)` over this state's candidates.
    pub fn kl(&self, theta: &[f64], reference: &[f64]) -> f64 {
        let lp = self.log_probs(theta);
        let lq = self.log_probs(reference);
        lp.iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b))
            .sum::<f64>()
            .max(0.0)
    }

    /// Gradient of the KL in `theta`: `sum_a p_a (phi_a - phi_bar)(log p_a - log q_a)`.
    pub fn kl_grad(&self, theta: &[f64], reference: &[f64]) -> Features {
        let lp = self.log_probs(theta);
        let lq = self.log_probs(reference);
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let mean = self.mean_features(&p);
        let mut g = [0.0; D];
        for (i, r) in self.rows.iter().enumerate() {
            let w = p[i] * (lp[i] - lq[i]);
            for k in 0..D {
                g[k] += w * (r[k] - mean[k]);
            }
        }
        g
    }

    /// Inverse-CDF draw from the policy.
    pub fn sample(&self, theta: &[f64], rng: &mut impl Rng) -> usize {
        let p = self.probs(theta);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    /// Most probable candidate; ties go to the earliest.
    pub fn greedy(&self, theta: &[f64]) -> usize {
        let l = self.logits(theta);
        let mut best = 0;
        for (i, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = i;
            }
        }
        best
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Probabilities of `candidates` under `params` in the observed state.
pub fn distribution(
    params: &ParameterMap,
    obs: &Observation,
    candidates: &[Action],
) -> Result<Vec<f64>, ParamError> {
    Ok(StateFeatures::new(obs, candidates).probs(weights(params)?))
}

pub fn grad_log_prob(
    params: &ParameterMap,
    obs: &Observation,
    candidates: &[Action],
    chosen: usize,
) -> Result<Features, ParamError> {
    Ok(StateFeatures::new(obs, candidates).grad_log_prob(weights(params)?, chosen))
}

pub fn entropy(
    params: &ParameterMap,
    obs: &Observation,
    candidates: &[Action],
) -> Result<f64, ParamError> {
    Ok(StateFeatures::new(obs, candidates).entropy(weights(params)?))
}

/// Roles in one-hot order, for reports.
pub fn role_name(i: usize) -> &'static str {
    match Role::ALL[i] {
        Role::Button => "button",
        Role::TextField => "text_field",
        Role::ListItem => "list_item",
        Role::Tab => "tab",
        Role::Icon => "icon",
    }
}

/// Human-readable name of each feature slot.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ActionKind::ALL
        .iter()
        .map(|k| format!("kind.{}", k.name()))
        .collect();
    names.extend((0..N_ROLES).map(|i| format!("role.{}", role_name(i))));
    names.extend(["overlap", "repeat", "next", "progress", "bias"].map(String::from));
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvInstance, Scenario};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs_for(task: &str, prefix: usize) -> Observation {
        let s = Scenario::builtin();
        let t = s.task(task).unwrap();
        let mut env = EnvInstance::reset(&s, t).unwrap();
        for a in &t.oracle[..prefix] {
            env.step(Some(a)).unwrap();
        }
        env.observe()
    }

    fn random_theta(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..D).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn layout() {
        assert_eq!(D, 26);
        assert_eq!(feature_names().len(), D);
    }

    #[test]
    fn features_are_deterministic_and_overlap_is_label_share() {
        let obs = obs_for("set-wifi", 0);
        let cands = obs.candidates();
        let tab = obs.screen.element("tab_network").unwrap().bbox.center();
        let f = features(&obs, &Action::Click(tab));
        assert_eq!(f, features(&obs, &Action::Click(tab)));
        assert_eq!(f[OVERLAP], 1.0);
        assert_eq!(f[N_KINDS + Role::Tab.index()], 1.0);
        let wait = features(&obs, &Action::Wait);
        assert!(wait[N_KINDS..BIAS].iter().all(|v| *v == 0.0));
        assert_eq!(StateFeatures::new(&obs, &cands).len(), cands.len());
    }

    #[test]
    fn repeat_and_slot_features() {
        // after the recipient field is focused, "dave" fills its slot but "lunch" does not
        let obs = obs_for("mail-send-dave", 2);
        assert_eq!(features(&obs, &Action::Type("dave".into()))[OVERLAP], 1.0);
        assert_eq!(features(&obs, &Action::Type("lunch".into()))[OVERLAP], 0.0);
        let compose = obs_for("mail-send-dave", 6);
        let c = compose.screen.element("compose").unwrap().bbox.center();
        assert_eq!(features(&compose, &Action::Click(c))[REPEAT], 1.0);
    }

    #[test]
    fn progress_only_on_terminal_actions() {
        let obs = obs_for("set-wifi", 2);
        assert_eq!(
            features(&obs, &Action::Finished(String::new()))[PROGRESS],
            0.1
        );
        assert_eq!(features(&obs, &Action::PressBack)[PROGRESS], 0.0);
    }

    #[test]
    fn distribution_examples() {
        let obs = obs_for("set-wifi", 0);
        let cands = obs.candidates();
        let p = distribution(&init_params(), &obs, &cands).unwrap();
        assert!(p
            .iter()
            .all(|x| (x - 1.0 / cands.len() as f64).abs() < 1e-15));
        let one = distribution(&init_params(), &obs, &cands[..1]).unwrap();
        assert_eq!(one, vec![1.0]);
        // the bias slot shifts every logit equally
        let sf = StateFeatures::new(&obs, &cands);
        let mut theta = random_theta(&mut ChaCha8Rng::seed_from_u64(1));
        let before = sf.probs(&theta);
        theta[BIAS] += 37.0;
        let after = sf.probs(&theta);
        for (a, b) in before.iter().zip(after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_log_prob_examples() {
        let e1 = {
            let mut f = [0.0; D];
            f[0] = 1.0;
            f
        };
        let e2 = {
            let mut f = [0.0; D];
            f[1] = 1.0;
            f
        };
        let sf = StateFeatures { rows: vec![e1, e2] };
        let g = sf.grad_log_prob(&[0.0; D], 0);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[1], -0.5);
        let single = StateFeatures { rows: vec![e1] };
        assert!(single.grad_log_prob(&[0.3; D], 0).iter().all(|v| *v == 0.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let s = Scenario::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let tasks: Vec<_> = s.tasks.iter().take(20).collect();
        for trial in 0..120 {
            let t = tasks[trial % tasks.len()];
            let prefix = rng.gen_range(0..t.oracle.len());
            let obs = obs_for(&t.id, prefix);
            let sf = StateFeatures::new(&obs, &obs.candidates());
            let theta = random_theta(&mut rng);
            let reference = random_theta(&mut rng);
            let chosen = rng.gen_range(0..sf.len());
            let g = sf.grad_log_prob(&theta, chosen);
            let ge = sf.entropy_grad(&theta);
            let gk = sf.kl_grad(&theta, &reference);
            for k in 0..D {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (sf.log_probs(&up)[chosen] - sf.log_probs(&dn)[chosen]) / (2.0 * h);
                let fe = (sf.entropy(&up) - sf.entropy(&dn)) / (2.0 * h);
                let fk = (sf.kl(&up, &reference) - sf.kl(&dn, &reference)) / (2.0 * h);
                for (a, b) in [(g[k], fd), (ge[k], fe), (gk[k], fk)] {
                    if a.abs().max(b.abs()) > 1e-7 {
                        worst = worst.max(rel_err(a, b));
                    }
                }
            }
        }
        assert!(worst < 1e-5, "max rel err {worst}");
    }

    #[test]
    fn entropy_bounds_and_kl_closed_form() {
        let obs = obs_for("set-wifi", 0);
        let sf = StateFeatures::new(&obs, &obs.candidates());
        assert!((sf.entropy(&[0.0; D]) - (sf.len() as f64).ln()).abs() < 1e-12);
        let mut sharp = [0.0; D];
        sharp[OVERLAP] = 60.0;
        assert!(sf.entropy(&sharp) < 1e-6);
        // (0.9, 0.1) against (0.5, 0.5)
        let mut a = [0.0; D];
        a[0] = 1.0;
        let b = [0.0; D];
        let two = StateFeatures { rows: vec![a, b] };
        let mut theta = [0.0; D];
        theta[0] = 9f64.ln();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((two.kl(&theta, &[0.0; D]) - expected).abs() < 1e-12);
        assert_eq!(two.kl(&theta, &theta), 0.0);
    }

    #[test]
    fn seeded_sampling_reproduces() {
        let obs = obs_for("set-wifi", 0);
        let sf = StateFeatures::new(&obs, &obs.candidates());
        let theta = random_theta(&mut ChaCha8Rng::seed_from_u64(5));
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sf.sample(&theta, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }
}
