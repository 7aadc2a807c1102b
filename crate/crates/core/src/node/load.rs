/// CPU/memory load source: `/proc` on Linux, or a scripted profile that
/// is cycled one value per sample.
#[derive(Debug, Clone)]
pub enum LoadSampler {
    Os { prev: Option<(u64, u64)> },
    Scripted { profile: Vec<f64>, next: usize },
}

impl LoadSampler {
    pub fn new(profile: &[f64]) -> Self {
        if profile.is_empty() {
            LoadSampler::Os { prev: None }
        } else {
            LoadSampler::Scripted { profile: profile.to_vec(), next: 0 }
        }
    }

    /// (cpu, mem) fractions in [0, 1].
    pub fn sample(&mut self) -> (f64, f64) {
        match self {
            LoadSampler::Scripted { profile, next } => {
                let v = profile[*next % profile.len()];
                *next += 1;
                (v, v)
            }
            LoadSampler::Os { prev } => {
                let cpu = match read_cpu_times() {
                    Some((idle, total)) => {
                        let (pi, pt) = prev.replace((idle, total)).unwrap_or((0, 0));
                        let (di, dt) = (idle.saturating_sub(pi), total.saturating_sub(pt));
                        if dt == 0 {
                            0.0
                        } else {
                            1.0 - di as f64 / dt as f64
                        }
                    }
                    None => 0.0,
                };
                (cpu.clamp(0.0, 1.0), read_mem_fraction().unwrap_or(0.0).clamp(0.0, 1.0))
            }
        }
    }
}

/// (idle + iowait, total) jiffies from the aggregate `/proc/stat` line.
fn read_cpu_times() -> Option<(u64, u64)> {
    let text = std::fs::read_to_string("/proc/stat").ok()?;
    let line = text.lines().next()?.strip_prefix("cpu ")?;
    let vals: Vec<u64> = line.split_whitespace().filter_map(|v| v.parse().ok()).collect();
    if vals.len() < 4 {
        return None;
    }
    let idle = vals[3] + vals.get(4).copied().unwrap_or(0);
    Some((idle, vals.iter().sum()))
}

fn read_mem_fraction() -> Option<f64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let field = |name: &str| -> Option<f64> {
        text.lines().find(|l| l.starts_with(name))?.split_whitespace().nth(1)?.parse().ok()
    };
    let total = field("MemTotal:")?;
    let available = field("MemAvailable:")?;
    (total > 0.0).then(|| 1.0 - available / total)
}
