//! Second implementation of the text metrics written from their definitions,
//! sharing no code with the library.

use std::collections::BTreeMap;

pub fn norm(s: &str) -> String {
    use unicode_normalization::UnicodeNormalization;
    let mut t: String = s.to_lowercase().nfc().collect();
    loop {
        let words: Vec<&str> = t.split_whitespace().collect();
        let mut u = words.join(" ");
        while let Some(c) = u.chars().last() {
            if ".?!,;:".contains(c) || c.is_whitespace() {
                u.pop();
            } else {
                break;
            }
        }
        if u == t {
            return u;
        }
        t = u;
    }
}

fn toks(s: &str) -> Vec<String> {
    norm(s).split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

pub fn em(p: &str, golds: &[String]) -> f64 {
    if golds.iter().any(|g| norm(g) == norm(p)) {
        1.0
    } else {
        0.0
    }
}

pub fn bleu1(p: &str, refs: &[String]) -> f64 {
    let c = toks(p);
    if c.is_empty() {
        return 0.0;
    }
    let rs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    let mut vocab: Vec<&String> = c.iter().collect();
    vocab.sort();
    vocab.dedup();
    let mut matched = 0usize;
    for w in vocab {
        let in_c = c.iter().filter(|x| *x == w).count();
        let best = rs.iter().map(|r| r.iter().filter(|x| *x == w).count()).max().unwrap_or(0);
        matched += in_c.min(best);
    }
    let mut best_len = rs[0].len();
    for r in &rs {
        let d = (r.len() as i64 - c.len() as i64).abs();
        let bd = (best_len as i64 - c.len() as i64).abs();
        if d < bd || (d == bd && r.len() < best_len) {
            best_len = r.len();
        }
    }
    let bp = if c.len() >= best_len {
        1.0
    } else {
        (1.0 - best_len as f64 / c.len() as f64).exp()
    };
    bp * matched as f64 / c.len() as f64
}

fn lcs(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs(&a[1..], &b[1..], memo)
    } else {
        lcs(&a[1..], b, memo).max(lcs(a, &b[1..], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

pub fn rouge(p: &str, refs: &[String]) -> f64 {
    let c = toks(p);
    let mut best = 0.0f64;
    for r in refs {
        let r = toks(r);
        if c.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs(&c, &r, &mut BTreeMap::new()) as f64;
        if l == 0.0 {
            continue;
        }
        let prec = l / c.len() as f64;
        let rec = l / r.len() as f64;
        let beta = 1.2f64;
        let f = (1.0 + beta.powi(2)) * prec * rec / (rec + beta.powi(2) * prec);
        best = best.max(f);
    }
    best
}

fn grams(t: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let mut i = 0;
    while i + n <= t.len() {
        *m.entry(t[i..i + n].join("\u{1}")).or_insert(0.0) += 1.0;
        i += 1;
    }
    m
}

pub fn cider(preds: &[String], refs: &[Vec<String>]) -> Vec<f64> {
    let n_img = preds.len() as f64;
    let mut out = vec![0.0; preds.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for rs in refs {
            let mut keys: Vec<String> = rs.iter().flat_map(|r| grams(&toks(r), n).into_keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                *df.entry(k).or_insert(0.0) += 1.0;
            }
        }
        let vec_of = |s: &str| -> BTreeMap<String, f64> {
            let g = grams(&toks(s), n);
            let total: f64 = g.values().sum();
            g.into_iter()
                .map(|(k, v)| {
                    let d = df.get(&k).copied().unwrap_or(0.0);
                    let d = if d < 1.0 { 1.0 } else { d };
                    let w = (n_img / d).ln();
                    (k, v / total * w)
                })
                .collect()
        };
        for i in 0..preds.len() {
            let pv = vec_of(&preds[i]);
            let mut acc = 0.0;
            for r in &refs[i] {
                let rv = vec_of(r);
                let dot: f64 = pv.iter().map(|(k, v)| v * rv.get(k).copied().unwrap_or(0.0)).sum();
                let np: f64 = pv.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr: f64 = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if np > 0.0 && nr > 0.0 {
                    acc += dot / (np * nr);
                }
            }
            out[i] += acc / refs[i].len() as f64 / 4.0 * 10.0;
        }
    }
    out
}
