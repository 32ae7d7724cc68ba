// single-seed phenomenon probe for calibration
use condseg::experiment::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("multitask");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = std::env::temp_dir().join(format!("condseg-cal-{which}-{seed}"));
    let _ = std::fs::remove_dir_all(&out);
    let preset: Preset = which.parse().unwrap();
    let spec = PresetSpec::for_preset(preset);
    let t0 = Instant::now();
    let results = run_experiment(preset, &preset.default_variants(), &[seed], &spec, &out, 2).unwrap();
    println!("== {which} seed {seed} in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    for s in &results.summaries {
        for row in &s.rows {
            let subsets: Vec<String> = row.subsets.iter().map(|x| format!("{}={:.3}", x.subset, x.f1)).collect();
            println!("  {:<22} avg {}  {}", row.label,
                row.average.map(|a| format!("{a:.3}")).unwrap_or("  -  ".into()), subsets.join(" "));
        }
    }
    for (variant, seed, probe) in &results.probes {
        println!("  probe {variant} seed {seed}: low {:.1} px, high {:.1} px, rel +{:.2}",
            probe.low_mean_pixels, probe.high_mean_pixels, probe.rel_increase);
    }
}
