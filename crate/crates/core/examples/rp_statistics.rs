//! Per-speaker RP frequency and length, distribution distances between two
//! groups of speakers, and k-means over speaker embeddings checked against
//! a made-up annotation with a chi-squared test.

use std::collections::BTreeMap;

use phrasebreak::corpus::prepare_utterance;
use phrasebreak::evalstats::{
    build_characteristic_tables, chi_squared, kmeans, ks_statistic, mean_std, rp_stats, wasserstein1,
};
use phrasebreak::rng::Stream;
use phrasebreak::synthgen::{gen_corpus, gen_speakers, oracle_psvm_mean};

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(24, 5, 5)?;
    let utts: Vec<_> = gen_corpus(&styles, 40, 5)?.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let stats = rp_stats(&utts);

    // faster vs slower pausers by the generator's bias
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in &styles {
        let f = stats[&s.speaker_id].f_rp_hz;
        if s.rp_bias > -2.0 { a.push(f) } else { b.push(f) }
    }
    let (ma, sa) = mean_std(&a);
    let (mb, sb) = mean_std(&b);
    println!("f_rp high bias {ma:.3}±{sa:.3} Hz ({}), low bias {mb:.3}±{sb:.3} Hz ({})", a.len(), b.len());
    println!("W1 {:.4}  KS {:.4}", wasserstein1(&a, &b)?, ks_statistic(&a, &b)?);

    let ids: Vec<u32> = styles.iter().map(|s| s.speaker_id).collect();
    let vectors = styles.iter().map(|s| oracle_psvm_mean(s, 16, 7)).collect::<phrasebreak::Result<Vec<_>>>()?;
    let km = kmeans(&vectors, 2, Stream::new(0).tag("example"), 300)?;
    println!("k-means inertia {:.3} after {} iterations", km.inertia, km.history.len());
    let assignments: BTreeMap<u32, usize> = ids.iter().copied().zip(km.assignments.iter().copied()).collect();

    // label speakers "breathy" when the generator made them pause a lot
    let annotations: BTreeMap<u32, Vec<String>> = styles
        .iter()
        .map(|s| {
            let p = if s.rp_bias > -2.0 { vec!["very breathy".to_string()] } else { vec![] };
            (s.speaker_id, p)
        })
        .collect();
    let tables = build_characteristic_tables(&assignments, &annotations);
    for (name, t) in &tables.tables {
        let c = chi_squared(t)?;
        println!("{name:<16} chi2 {:.3}  df {}  p {:.4}  V {:.3}{}", c.chi2, c.df, c.p, c.cramers_v, if c.sparse { "  (sparse)" } else { "" });
    }
    Ok(())
}
