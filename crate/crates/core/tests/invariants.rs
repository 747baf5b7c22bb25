use std::sync::Arc;

use guirl_core::action::*;
use guirl_core::env::{LocalEnvProvider, Scenario};
use guirl_core::grpo::{grpo_loss_and_grad, Member, RolloutGroup};
use guirl_core::policy::{self, StateFeatures, D};
use guirl_core::reward::*;
use guirl_core::rollout::{rollout, Decode, StepRecord};
use guirl_core::tasks::{bucket_quotas, similarity, Bucket, DedupConfig, TaskPool};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    (0..=COORD_MAX, 0..=COORD_MAX).prop_map(|(x, y)| Point::new(x, y))
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ',()=\\[\\]\\\\<>/é-]{0,12}"
}

fn action(platform: Platform) -> BoxedStrategy<Action> {
    let mut s: Vec<BoxedStrategy<Action>> = vec![
        point().prop_map(Action::Click).boxed(),
        point().prop_map(Action::LongPress).boxed(),
        (point(), point()).prop_map(|(start, end)| Action::Drag { start, end }).boxed(),
        text().prop_map(Action::Type).boxed(),
        text().prop_map(Action::Finished).boxed(),
        text().prop_map(Action::CallUser).boxed(),
        Just(Action::Wait).boxed(),
        Just(Action::PressBack).boxed(),
        Just(Action::PressHome).boxed(),
        Just(Action::PressEnter).boxed(),
        Just(Action::PressRecent).boxed(),
    ];
    match platform {
        Platform::Mobile => {
            s.push((point(), point()).prop_map(|(start, end)| Action::Scroll(Scroll::Swipe { start, end })).boxed());
            s.push(text().prop_map(|a| Action::Launch(LaunchTarget::App(a))).boxed());
        }
        Platform::Web => {
            s.push(
                prop_oneof![Just(ScrollDirection::Up), Just(ScrollDirection::Down)]
                    .prop_map(|d| Action::Scroll(Scroll::Direction(d)))
                    .boxed(),
            );
            s.push(text().prop_map(|u| Action::Launch(LaunchTarget::Url(u))).boxed());
            s.push(point().prop_map(Action::Hover).boxed());
            s.push(point().prop_map(Action::DoubleClick).boxed());
            s.push(prop::collection::vec(text(), 1..=MAX_HOTKEYS).prop_map(Action::Hotkey).boxed());
        }
    }
    proptest::strategy::Union::new(s).boxed()
}

fn features() -> impl Strategy<Value = StateFeatures> {
    prop::collection::vec((0..policy::N_KINDS, prop::collection::vec(0.0..1.0f64, 4)), 1..6).prop_map(|rows| {
        StateFeatures {
            rows: rows
                .into_iter()
                .map(|(k, v)| {
                    let mut f = [0.0; D];
                    f[k] = 1.0;
                    f[policy::OVERLAP..policy::BIAS].copy_from_slice(&v);
                    f[policy::BIAS] = 1.0;
                    f
                })
                .collect(),
        }
    })
}

proptest! {
    #[test]
    fn mobile_actions_round_trip(a in action(Platform::Mobile)) {
        prop_assert_eq!(parse_action(&a.to_string(), Platform::Mobile), Ok(a.clone()));
        let r = parse_response(&render_response("t", &a, "c"), Platform::Mobile);
        prop_assert!(r.format_ok);
        prop_assert_eq!(r.action, Ok(a));
    }

    #[test]
    fn web_actions_round_trip(a in action(Platform::Web)) {
        prop_assert_eq!(parse_action(&a.to_string(), Platform::Web), Ok(a));
    }

    #[test]
    fn parsers_never_panic(s in "\\PC{0,60}") {
        let _ = parse_action(&s, Platform::Mobile);
        let _ = parse_action(&s, Platform::Web);
        let _ = parse_response(&s, Platform::Mobile);
        let _ = parse_grounding(&s);
    }

    #[test]
    fn f1_is_symmetric_and_bounded(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
        let f = content_f1(&a, &b);
        prop_assert_eq!(f, content_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn decay_is_monotone(t_min in 1usize..30, extra in 0usize..90, eta in 0.01..0.999f64) {
        let t = t_min + extra;
        let d = trace_decay(t, t_min, eta);
        prop_assert!(d > 0.0 && d <= 1.0);
        prop_assert!(trace_decay(t + 1, t_min, eta) < d);
    }

    #[test]
    fn coord_reward_is_bounded(x in 0..=COORD_MAX, y in 0..=COORD_MAX) {
        let b = BBox::new(400, 400, 600, 600).unwrap();
        let r = coord_reward(Point::new(x, y), &b, &OfflineRewardConfig::default().coord_tiers);
        prop_assert!((0.0..=1.0).contains(&r));
        if b.contains(Point::new(x, y)) {
            prop_assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn advantages_are_centred_and_loss_vanishes_at_old_policy(
        theta in prop::collection::vec(-2.0..2.0f64, D),
        members in prop::collection::vec((prop::collection::vec((features(), any::<prop::sample::Index>()), 1..4), -1.0..1.0f64), 2..8),
    ) {
        let members: Vec<Member> = members
            .into_iter()
            .map(|(steps, reward)| Member {
                steps: steps
                    .into_iter()
                    .map(|(features, idx)| {
                        let chosen = idx.index(features.len());
                        let old_prob = features.probs(&theta)[chosen];
                        StepRecord { features, chosen, old_prob }
                    })
                    .collect(),
                reward,
            })
            .collect();
        let g = RolloutGroup::new(members, 1e-4);
        let mean = g.advantages.iter().sum::<f64>() / g.advantages.len() as f64;
        prop_assert!(mean.abs() < 1e-12);
        let (loss, _) = grpo_loss_and_grad(&g, &theta, 0.2).unwrap();
        prop_assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn quotas_fill_the_batch(a in 0.0..1.0f64, b in 0.0..1.0f64, batch in 0usize..100) {
        let (p0, p1) = (a, (1.0 - a) * b);
        let q = bucket_quotas([p0, p1, 1.0 - p0 - p1], batch).unwrap();
        prop_assert_eq!(q.iter().sum::<usize>(), batch);
    }

    #[test]
    fn similarity_is_symmetric(a in "[a-d ]{0,16}", b in "[a-d ]{0,16}") {
        prop_assert_eq!(similarity(&a, &b), similarity(&b, &a));
    }
}

#[test]
fn pools_hold_no_near_duplicates() {
    let s = Scenario::builtin();
    let pool = TaskPool::from_tasks(s.tasks.clone(), DedupConfig::default()).unwrap();
    let t = pool.tasks();
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            assert!(similarity(&t[i].query, &t[j].query) < 0.9, "{} / {}", t[i].id, t[j].id);
        }
    }
    for task in t {
        assert_eq!(task.bucket, Bucket::of(task.n_steps));
    }
}

#[test]
fn rollouts_stay_within_budget_and_reward_range() {
    let s = Arc::new(Scenario::builtin());
    let provider = LocalEnvProvider::new(s.clone());
    let cfg = OnlineRewardConfig::default();
    for (i, task) in s.tasks.iter().enumerate() {
        let r = rollout(&provider, task, &[0.0; D], Decode::Sample(i as u64)).unwrap();
        assert!(r.trajectory.len() <= task.max_steps());
        let reward = online_trajectory_reward(&r.trajectory, Some(task.n_steps), &cfg);
        assert!((-1.0..=1.0).contains(&reward), "{reward}");
    }
}
