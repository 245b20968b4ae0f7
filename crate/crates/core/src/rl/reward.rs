use crate::tasks::{parse_answer, SymbolTable};

/// Binary exact-match reward on the `<answer>` span (whitespace-trimmed).
pub fn compute_reward(completion: &[u32], target: &str, table: &SymbolTable) -> f64 {
    reward_from_text(&table.decode(completion), target)
}

pub fn reward_from_text(text: &str, target: &str) -> f64 {
    match parse_answer(text) {
        Some(a) if a == target.trim() => 1.0,
        _ => 0.0,
    }
}

/// `A_i = (r_i − mean r) / std r` with the population std. Groups whose std
/// is at most `eps` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
    if std <= eps {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reward_examples() {
        let t = SymbolTable::new();
        let ok = t.encode("<think>3+4=7</think><answer>7</answer><eos>").unwrap();
        assert_eq!(compute_reward(&ok, "7", &t), 1.0);
        assert_eq!(compute_reward(&ok, "8", &t), 0.0);
        let open = t.encode("<answer>7").unwrap();
        assert_eq!(compute_reward(&open, "7", &t), 0.0);
        assert_eq!(reward_from_text("<answer>  7 </answer>", "7"), 1.0);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-6), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantages(&[0.3; 5], 1e-6), vec![0.0; 5]);
    }

    proptest! {
        #[test]
        fn advantage_moments(r in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let a = group_advantages(&r, 1e-6);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!(std == 0.0 || (1.0 - 1e-6..=1.0 + 1e-12).contains(&std));
        }
    }
}
