//! Grounding, offline navigation and online trajectory rewards.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    Action, AgentResponse, BBox, GroundingAnswer, LaunchTarget, Platform, Point, Scroll, COORD_MAX,
};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardConfigError {
    #[error("reward weights must be non-negative (w1={w1}, w2={w2})")]
    NegativeWeight { w1: f64, w2: f64 },
    #[error("coordinate tiers: {0}")]
    Tiers(&'static str),
    #[error("eta must lie in (0, 1], got {0}")]
    Eta(f64),
    #[error("completion reward must be positive, got {0}")]
    Completion(f64),
    #[error("unparseable-action penalty must be non-negative, got {0}")]
    Penalty(f64),
}

/// One rung of the coordinate tolerance ladder: points inside the target box
/// scaled by `expansion` about its center earn `reward`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordTier {
    pub expansion: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineRewardConfig {
    pub w1: f64,
    pub w2: f64,
    pub coord_tiers: Vec<CoordTier>,
}

impl Default for OfflineRewardConfig {
    fn default() -> Self {
        Self {
            w1: 0.1,
            w2: 0.9,
            coord_tiers: vec![
                CoordTier {
                    expansion: 1.0,
                    reward: 1.0,
                },
                CoordTier {
                    expansion: 1.5,
                    reward: 0.5,
                },
                CoordTier {
                    expansion: 2.0,
                    reward: 0.25,
                },
            ],
        }
    }
}

impl OfflineRewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(RewardConfigError::NegativeWeight {
                w1: self.w1,
                w2: self.w2,
            });
        }
        validate_tiers(&self.coord_tiers)
    }
}

pub fn validate_tiers(tiers: &[CoordTier]) -> Result<(), RewardConfigError> {
    let first = tiers
        .first()
        .ok_or(RewardConfigError::Tiers("at least one tier required"))?;
    if first.expansion != 1.0 {
        return Err(RewardConfigError::Tiers(
            "first expansion factor must be 1.0",
        ));
    }
    if tiers.iter().any(|t| !(0.0..=1.0).contains(&t.reward)) {
        return Err(RewardConfigError::Tiers("tier rewards must lie in [0, 1]"));
    }
    for w in tiers.windows(2) {
        if w[1].expansion <= w[0].expansion {
            return Err(RewardConfigError::Tiers(
                "expansion factors must strictly increase",
            ));
        }
        if w[1].reward >= w[0].reward {
            return Err(RewardConfigError::Tiers(
                "tier rewards must strictly decrease",
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineRewardConfig {
    pub r_comp: f64,
    pub eta: f64,
    pub lambda_penalty: f64,
}

impl Default for OnlineRewardConfig {
    fn default() -> Self {
        Self {
            r_comp: 1.0,
            eta: 0.9,
            lambda_penalty: 0.1,
        }
    }
}

impl OnlineRewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(RewardConfigError::Eta(self.eta));
        }
        if !(self.r_comp > 0.0) {
            return Err(RewardConfigError::Completion(self.r_comp));
        }
        if !(self.lambda_penalty >= 0.0) {
            return Err(RewardConfigError::Penalty(self.lambda_penalty));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundingTarget {
    Box(BBox),
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingReward {
    pub format: f64,
    pub point_in_box: f64,
    pub total: f64,
}

/// `pred` is `None` when the answer failed grounding-format parsing.
pub fn grounding_reward(
    pred: Option<GroundingAnswer>,
    gt: GroundingTarget,
    cfg: &OfflineRewardConfig,
) -> GroundingReward {
    let format = if pred.is_some() { 1.0 } else { 0.0 };
    let hit = match (pred, gt) {
        (Some(GroundingAnswer::Point(p)), GroundingTarget::Box(b)) => b.contains(p),
        (Some(GroundingAnswer::Refusal), GroundingTarget::Infeasible) => true,
        _ => false,
    };
    let point_in_box = if hit { 1.0 } else { 0.0 };
    GroundingReward {
        format,
        point_in_box,
        total: cfg.w1 * format + cfg.w2 * point_in_box,
    }
}

pub fn format_reward(resp: &AgentResponse) -> f64 {
    if resp.format_ok {
        1.0
    } else {
        0.0
    }
}

fn token_counts(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in text.to_lowercase().split_whitespace() {
        *counts.entry(tok.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Token-level F1 over lowercase whitespace tokens, counting multiplicity.
pub fn content_f1(pred: &str, gt: &str) -> f64 {
    let p = token_counts(pred);
    let g = token_counts(gt);
    let np: usize = p.values().sum();
    let ng: usize = g.values().sum();
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = p
        .iter()
        .map(|(tok, c)| g.get(tok).map_or(0, |d| (*c).min(*d)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

fn expanded_contains(b: &BBox, factor: f64, p: Point) -> bool {
    let cx = (b.x1() + b.x2()) as f64 / 2.0;
    let cy = (b.y1() + b.y2()) as f64 / 2.0;
    let hw = (b.x2() - b.x1()) as f64 / 2.0 * factor;
    let hh = (b.y2() - b.y1()) as f64 / 2.0 * factor;
    let max = COORD_MAX as f64;
    let (x0, x1) = ((cx - hw).max(0.0), (cx + hw).min(max));
    let (y0, y1) = ((cy - hh).max(0.0), (cy + hh).min(max));
    let (x, y) = (p.x as f64, p.y as f64);
    x0 <= x && x <= x1 && y0 <= y && y <= y1
}

/// Reward of the first tier whose expanded box contains `pred`, else 0.
pub fn coord_reward(pred: Point, gt_box: &BBox, tiers: &[CoordTier]) -> f64 {
    tiers
        .iter()
        .find(|t| expanded_contains(gt_box, t.expansion, pred))
        .map_or(0.0, |t| t.reward)
}

/// A single-step supervised prompt with its ground-truth action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub state_ref: String,
    pub instruction: String,
    pub platform: Platform,
    pub gt_action: Action,
    /// Target box of point actions, or of the start point of two-point actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BBox>,
    /// Target box of the end point of Drag and mobile Scroll.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_end_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step sample {state_ref}: {msg}")]
pub struct StepSampleError {
    pub state_ref: String,
    pub msg: &'static str,
}

impl StepSample {
    pub fn validate(&self) -> Result<(), StepSampleError> {
        let err = |msg| {
            Err(StepSampleError {
                state_ref: self.state_ref.clone(),
                msg,
            })
        };
        let needs_box = self.gt_action.point().is_some() || self.gt_action.endpoints().is_some();
        if needs_box != self.gt_box.is_some() {
            return err("gt_box must be present exactly for coordinate actions");
        }
        if self.gt_action.endpoints().is_some() != self.gt_end_box.is_some() {
            return err("gt_end_box must be present exactly for two-point actions");
        }
        if self.gt_action.content().is_some() != self.gt_content.is_some() {
            return err("gt_content must be present exactly for text actions");
        }
        if self.gt_action.validate(self.platform).is_err() {
            return err("gt_action is not valid on the sample platform");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub format: f64,
    pub type_match: f64,
    /// Coordinate or content score; `None` for argument-free actions.
    pub component: Option<f64>,
    pub action: f64,
    pub total: f64,
}

impl StepReward {
    /// Exact-action success: right type with a perfect argument score.
    pub fn is_step_success(&self) -> bool {
        self.action >= 1.0
    }
}

fn point_box(sample: &StepSample, which_end: bool, fallback: Point) -> BBox {
    let b = if which_end {
        sample.gt_end_box
    } else {
        sample.gt_box
    };
    b.unwrap_or_else(|| {
        BBox::new(fallback.x, fallback.y, fallback.x, fallback.y).expect("on-screen point")
    })
}

fn argument_score(pred: &Action, sample: &StepSample, cfg: &OfflineRewardConfig) -> Option<f64> {
    let gt = &sample.gt_action;
    if let (Some(p), Some(g)) = (pred.point(), gt.point()) {
        return Some(coord_reward(
            p,
            &point_box(sample, false, g),
            &cfg.coord_tiers,
        ));
    }
    if let (Some((ps, pe)), Some((gs, ge))) = (pred.endpoints(), gt.endpoints()) {
        let a = coord_reward(ps, &point_box(sample, false, gs), &cfg.coord_tiers);
        let b = coord_reward(pe, &point_box(sample, true, ge), &cfg.coord_tiers);
        return Some((a + b) / 2.0);
    }
    if let Some(p) = pred.content() {
        let g = sample
            .gt_content
            .as_deref()
            .or(gt.content())
            .unwrap_or_default();
        return Some(content_f1(p, g));
    }
    match (pred, gt) {
        (Action::Scroll(Scroll::Direction(a)), Action::Scroll(Scroll::Direction(b))) => {
            Some(if a == b { 1.0 } else { 0.0 })
        }
        (Action::Launch(a), Action::Launch(b)) => {
            let text = |t: &LaunchTarget| match t {
                LaunchTarget::App(s) | LaunchTarget::Url(s) => s.clone(),
            };
            Some(content_f1(&text(a), &text(b)))
        }
        (Action::Hotkey(a), Action::Hotkey(b)) => Some(content_f1(&a.join(" "), &b.join(" "))),
        _ => None,
    }
}

/// Step reward `w1 * format + w2 * action` for an offline navigation prompt.
///
/// The action part averages the type reward with the coordinate or content
/// score when the types match; argument-free actions score on type alone.
/// Format and action validity are judged independently.
pub fn step_reward(resp: &AgentResponse, gt: &StepSample, cfg: &OfflineRewardConfig) -> StepReward {
    let format = format_reward(resp);
    let (type_match, component, action) = match &resp.action {
        Ok(pred) if pred.kind() == gt.gt_action.kind() => match argument_score(pred, gt, cfg) {
            Some(c) => (1.0, Some(c), (1.0 + c) / 2.0),
            None => (1.0, None, 1.0),
        },
        _ => (0.0, None, 0.0),
    };
    StepReward {
        format,
        type_match,
        component,
        action,
        total: cfg.w1 * format + cfg.w2 * action,
    }
}

/// `eta^((T - T_min) / T_min)`, with the exponent clamped at zero for `T < T_min`.
pub fn trace_decay(t: usize, t_min: usize, eta: f64) -> f64 {
    let t_min = t_min.max(1);
    let exponent = (t as f64 - t_min as f64).max(0.0) / t_min as f64;
    eta.powf(exponent)
}

/// Trajectory reward: decayed completion bonus plus `-lambda` per unparseable step.
///
/// `t_min` is the shortest successful length in the rollout group, `None`
/// when no member succeeded (the decay is then irrelevant and taken as 1).
pub fn online_trajectory_reward(
    tau: &Trajectory,
    t_min: Option<usize>,
    cfg: &OnlineRewardConfig,
) -> f64 {
    let t = tau.len();
    let success = if tau.success {
        let decay = t_min.map_or(1.0, |m| trace_decay(t, m, cfg.eta));
        cfg.r_comp * decay
    } else {
        0.0
    };
    let penalty = tau.unparseable_steps() as f64 * cfg.lambda_penalty;
    success - penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{parse_response, render_response};

    fn bx(x1: i32, y1: i32, x2: i32, y2: i32) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cfg() -> OfflineRewardConfig {
        OfflineRewardConfig::default()
    }

    fn click_sample(b: BBox) -> StepSample {
        StepSample {
            state_ref: "s".into(),
            instruction: "q".into(),
            platform: Platform::Mobile,
            gt_action: Action::Click(b.center()),
            gt_box: Some(b),
            gt_end_box: None,
            gt_content: None,
        }
    }

    fn response(a: &Action) -> AgentResponse {
        parse_response(&render_response("t", a, "c"), Platform::Mobile)
    }

    #[test]
    fn grounding_examples() {
        let b = GroundingTarget::Box(bx(0, 0, 100, 100));
        let r = grounding_reward(Some(GroundingAnswer::Point(Point::new(50, 50))), b, &cfg());
        assert_eq!(r.point_in_box, 1.0);
        assert!((r.total - 1.0).abs() < 1e-12);
        let r = grounding_reward(
            Some(GroundingAnswer::Refusal),
            GroundingTarget::Infeasible,
            &cfg(),
        );
        assert_eq!(r.point_in_box, 1.0);
        let r = grounding_reward(
            Some(GroundingAnswer::Point(Point::new(200, 200))),
            b,
            &cfg(),
        );
        assert_eq!(r.point_in_box, 0.0);
        let r = grounding_reward(None, b, &cfg());
        assert_eq!((r.format, r.total), (0.0, 0.0));
        let r = grounding_reward(Some(GroundingAnswer::Refusal), b, &cfg());
        assert_eq!(r.point_in_box, 0.0);
    }

    #[test]
    fn format_reward_cases() {
        assert_eq!(format_reward(&response(&Action::Wait)), 1.0);
        let missing = parse_response("<think>t</think><action>Wait()</action>", Platform::Mobile);
        assert_eq!(format_reward(&missing), 0.0);
        let dup = parse_response(
            "<think>t</think><think>u</think><action>Wait()</action><conclusion>c</conclusion>",
            Platform::Mobile,
        );
        assert_eq!(format_reward(&dup), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert!((content_f1("book a flight", "book flight") - 0.8).abs() < 1e-12);
        assert_eq!(content_f1("Send It", "send it"), 1.0);
        assert_eq!(content_f1("alpha", "beta"), 0.0);
        assert_eq!(content_f1("", ""), 1.0);
        assert_eq!(content_f1("", "x"), 0.0);
        assert_eq!(content_f1("x", "  "), 0.0);
    }

    #[test]
    fn coord_tier_examples() {
        let tiers = cfg().coord_tiers;
        let b = bx(100, 100, 200, 200);
        assert_eq!(coord_reward(b.center(), &b, &tiers), 1.0);
        // 1.5x expansion spans [75, 225]
        assert_eq!(coord_reward(Point::new(210, 150), &b, &tiers), 0.5);
        // 2x expansion spans [50, 250]
        assert_eq!(coord_reward(Point::new(240, 150), &b, &tiers), 0.25);
        assert_eq!(coord_reward(Point::new(900, 900), &b, &tiers), 0.0);
    }

    #[test]
    fn expansion_is_clipped_to_screen() {
        let tiers = cfg().coord_tiers;
        let b = bx(0, 0, 10, 10);
        assert_eq!(coord_reward(Point::new(0, 0), &b, &tiers), 1.0);
        assert_eq!(coord_reward(Point::new(12, 5), &b, &tiers), 0.5);
        assert_eq!(coord_reward(Point::new(13, 5), &b, &tiers), 0.25);
    }

    #[test]
    fn action_reward_examples() {
        let b = bx(100, 100, 200, 200);
        let r = step_reward(
            &response(&Action::Click(Point::new(150, 120))),
            &click_sample(b),
            &cfg(),
        );
        assert_eq!((r.type_match, r.component, r.action), (1.0, Some(1.0), 1.0));
        assert!((r.total - 1.0).abs() < 1e-12);

        let typed = StepSample {
            gt_action: Action::Type("a b".into()),
            gt_box: None,
            gt_content: Some("a b".into()),
            ..click_sample(b)
        };
        let r = step_reward(&response(&Action::Type("a b".into())), &typed, &cfg());
        assert_eq!(r.action, 1.0);

        let r = step_reward(&response(&Action::Wait), &click_sample(b), &cfg());
        assert_eq!((r.type_match, r.action), (0.0, 0.0));
        assert!((r.total - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unparseable_scores_zero_action() {
        let resp = parse_response(
            "<think>t</think><action>Clck()</action><conclusion>c</conclusion>",
            Platform::Mobile,
        );
        let r = step_reward(&resp, &click_sample(bx(0, 0, 10, 10)), &cfg());
        assert_eq!((r.format, r.action), (1.0, 0.0));
    }

    #[test]
    fn drag_uses_both_boxes() {
        let s = StepSample {
            gt_action: Action::Drag {
                start: Point::new(150, 150),
                end: Point::new(550, 550),
            },
            gt_box: Some(bx(100, 100, 200, 200)),
            gt_end_box: Some(bx(500, 500, 600, 600)),
            ..click_sample(bx(0, 0, 1, 1))
        };
        let pred = Action::Drag {
            start: Point::new(150, 150),
            end: Point::new(900, 900),
        };
        let r = step_reward(&response(&pred), &s, &cfg());
        assert_eq!(r.component, Some(0.5));
        assert_eq!(r.action, 0.75);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn nullary_match_is_full_credit() {
        let s = StepSample {
            gt_action: Action::PressBack,
            gt_box: None,
            ..click_sample(bx(0, 0, 1, 1))
        };
        let r = step_reward(&response(&Action::PressBack), &s, &cfg());
        assert_eq!((r.component, r.action), (None, 1.0));
        assert!(r.is_step_success());
    }

    #[test]
    fn sample_validation() {
        let mut s = click_sample(bx(0, 0, 10, 10));
        assert!(s.validate().is_ok());
        s.gt_box = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn decay_examples() {
        assert_eq!(trace_decay(5, 5, 0.9), 1.0);
        assert!((trace_decay(10, 5, 0.9) - 0.9).abs() < 1e-12);
        assert!((trace_decay(8, 4, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(trace_decay(3, 5, 0.5), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut bad = cfg();
        bad.coord_tiers[1].expansion = 0.9;
        assert!(bad.validate().is_err());
        let mut bad = cfg();
        bad.coord_tiers[0].expansion = 1.2;
        assert!(bad.validate().is_err());
        let mut bad = cfg();
        bad.w1 = -0.1;
        assert!(bad.validate().is_err());
        assert!(OnlineRewardConfig {
            eta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OnlineRewardConfig {
            eta: 1.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(OnlineRewardConfig {
            r_comp: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
