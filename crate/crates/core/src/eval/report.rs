use std::fmt::Write;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackScores {
    pub track: String,
    /// Median SDR per source in report order; `None` when the reference is
    /// silent in every frame.
    pub sdr: Vec<Option<f64>>,
}

/// Per-track, per-source median SDR with source and overall averages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub separator: String,
    pub sources: Vec<String>,
    pub tracks: Vec<TrackScores>,
    /// Track name and reason.
    pub skipped: Vec<(String, String)>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

impl EvalReport {
    pub fn new(separator: String, sources: Vec<String>) -> Self {
        Self { separator, sources, tracks: Vec::new(), skipped: Vec::new() }
    }

    /// Mean over tracks of each source's median SDR.
    pub fn source_means(&self) -> Vec<Option<f64>> {
        (0..self.sources.len()).map(|i| mean(self.tracks.iter().filter_map(|t| t.sdr[i]))).collect()
    }

    /// Mean of the per-source means.
    pub fn overall_mean(&self) -> Option<f64> {
        mean(self.source_means().into_iter().flatten())
    }

    /// `track,source,median_sdr_db`; skipped tracks carry `skipped`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("track,source,median_sdr_db\n");
        self.write_csv_rows(&mut out, "");
        out
    }

    fn write_csv_rows(&self, out: &mut String, prefix: &str) {
        for t in &self.tracks {
            for (s, v) in self.sources.iter().zip(&t.sdr) {
                let v = v.map_or_else(|| "nan".into(), |v| format!("{v:.6}"));
                let _ = writeln!(out, "{prefix}{},{s},{v}", t.track);
            }
        }
        for (t, _) in &self.skipped {
            for s in &self.sources {
                let _ = writeln!(out, "{prefix}{t},{s},skipped");
            }
        }
    }

    /// Plain-text table: one row per track, a column per source, then the
    /// per-track average; the last row holds the source averages.
    pub fn to_table(&self) -> String {
        let width = self.tracks.iter().map(|t| t.track.len()).chain([7]).max().unwrap_or(7) + 2;
        let mut out = format!("{}: SDR (simplified), median over 1 s frames, dB\n", self.separator);
        let _ = write!(out, "{:<width$}", "Track");
        for s in &self.sources {
            let _ = write!(out, "{s:>10}");
        }
        let _ = writeln!(out, "{:>10}", "Average");
        for t in &self.tracks {
            let _ = write!(out, "{:<width$}", t.track);
            for v in &t.sdr {
                let _ = write!(out, "{:>10}", cell(*v));
            }
            let _ = writeln!(out, "{:>10}", cell(mean(t.sdr.iter().flatten().copied())));
        }
        let _ = write!(out, "{:<width$}", "Average");
        for v in self.source_means() {
            let _ = write!(out, "{:>10}", cell(v));
        }
        let _ = writeln!(out, "{:>10}", cell(self.overall_mean()));
        for (t, why) in &self.skipped {
            let _ = writeln!(out, "skipped {t}: {why}");
        }
        out
    }
}

/// One [`EvalReport`] per slice count.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<(usize, EvalReport)>,
}

impl SweepReport {
    /// `slices,track,source,median_sdr_db`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slices,track,source,median_sdr_db\n");
        for (i, r) in &self.rows {
            r.write_csv_rows(&mut out, &format!("{i},"));
        }
        out
    }

    /// One row per slice count with the source and overall averages.
    pub fn to_table(&self) -> String {
        let mut out = String::from("SDR (simplified) by slice count, dB\n");
        let sources = self.rows.first().map(|(_, r)| r.sources.clone()).unwrap_or_default();
        let _ = write!(out, "{:>6}", "I");
        for s in &sources {
            let _ = write!(out, "{s:>10}");
        }
        let _ = writeln!(out, "{:>10}{:>9}", "Average", "Skipped");
        for (i, r) in &self.rows {
            let _ = write!(out, "{i:>6}");
            for v in r.source_means() {
                let _ = write!(out, "{:>10}", cell(v));
            }
            let _ = writeln!(out, "{:>10}{:>9}", cell(r.overall_mean()), r.skipped.len());
        }
        out
    }
}
