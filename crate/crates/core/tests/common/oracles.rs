//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use num_rational::Ratio;

/// Weighted-F1 from a full confusion matrix, via precision and recall.
pub fn brute_force_weighted_f1(gold: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    assert_eq!(gold.len(), pred.len());
    let mut confusion = vec![vec![0i128; n_classes]; n_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let n = gold.len() as i128;
    let mut total = Ratio::from_integer(0i128);
    for c in 0..n_classes {
        let support: i128 = confusion[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = confusion[c][c];
        let predicted: i128 = (0..n_classes).map(|r| confusion[r][c]).sum();
        let f1 = if tp == 0 {
            Ratio::from_integer(0)
        } else {
            let precision = Ratio::new(tp, predicted);
            let recall = Ratio::new(tp, support);
            Ratio::from_integer(2) * precision * recall / (precision + recall)
        };
        total += Ratio::new(support, n) * f1;
    }
    // correctly rounded quotient of two integers
    ratio_to_f64(*total.numer(), *total.denom())
}

fn ratio_to_f64(num: i128, den: i128) -> f64 {
    let q = num as f64 / den as f64;
    // both fit in 53 bits for the instance sizes used, so the division rounds once
    assert!(num.unsigned_abs() < (1u128 << 53) && den.unsigned_abs() < (1u128 << 53));
    q
}

/// Mask definitions checked entry by entry.
pub fn mask_violations(speakers: &[usize], global: &[bool], intra: &[bool], inter: &[bool]) -> Vec<String> {
    let n = speakers.len();
    let mut out = Vec::new();
    for i in 0..n {
        for k in 0..n {
            let at = i * n + k;
            let same = speakers[i] == speakers[k];
            if !global[at] {
                out.push(format!("global masks ({i},{k})"));
            }
            if intra[at] != same {
                out.push(format!("intra wrong at ({i},{k})"));
            }
            if inter[at] != !same {
                out.push(format!("inter wrong at ({i},{k})"));
            }
            if intra[at] == inter[at] {
                out.push(format!("intra/inter not a partition at ({i},{k})"));
            }
            for m in [global, intra, inter] {
                if m[at] != m[k * n + i] {
                    out.push(format!("asymmetric at ({i},{k})"));
                }
            }
        }
    }
    out
}

/// Every speaker sequence of length 1..=max_len over `n_ids` ids.
pub fn all_sequences(n_ids: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        let total = n_ids.pow(len as u32);
        for mut code in 0..total {
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push(code % n_ids);
                code /= n_ids;
            }
            out.push(seq);
        }
    }
    out
}
