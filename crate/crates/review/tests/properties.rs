use std::collections::BTreeMap;

use pairdiff_review::{build_report, AnnotationVote, Metric, Score, VoteStore};
use proptest::prelude::*;

fn vote() -> impl Strategy<Value = AnnotationVote> {
    (0usize..6, 0usize..4, 0usize..3, 0usize..3).prop_map(|(s, a, m, v)| AnnotationVote {
        sample_id: format!("s{s}"),
        annotator_id: format!("a{a}"),
        metric: Metric::ALL[m],
        score: Score::ALL[v],
        timestamp: Some(0),
    })
}

proptest! {
    #[test]
    fn one_live_vote_per_key_and_percentages_total(votes in prop::collection::vec(vote(), 0..60)) {
        let store = VoteStore::in_memory();
        let mut last = BTreeMap::new();
        for v in &votes {
            store.put(v.clone()).unwrap();
            last.insert(v.key(), v.score);
        }
        let live = store.live();
        prop_assert_eq!(live.len(), last.len());
        for v in &live {
            prop_assert_eq!(last[&v.key()], v.score);
        }
        let annotators: Vec<String> = (0..4).map(|a| format!("a{a}")).collect();
        let r = build_report(6, &annotators, &live);
        for m in Metric::ALL {
            let mr = &r.metrics[&m];
            let voted = live.iter().filter(|v| v.metric == m).map(|v| &v.sample_id).collect::<std::collections::BTreeSet<_>>().len() as u64;
            prop_assert_eq!(mr.resolved_samples, voted);
            prop_assert_eq!(mr.counts.total(), voted);
            let p = &mr.percent;
            let sum = p.high + p.medium + p.low + p.unresolved;
            if voted > 0 {
                prop_assert!((sum - 100.0).abs() < 1e-9, "sum {}", sum);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }
}
