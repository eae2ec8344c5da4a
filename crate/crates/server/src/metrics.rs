//! Process resource usage for the stats endpoint and the scaling harness.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcessUsage {
    /// Current resident set size.
    pub rss_mb: Option<f64>,
    /// Peak resident set size since process start.
    pub peak_rss_mb: Option<f64>,
    /// User plus system CPU time.
    pub cpu_time_s: Option<f64>,
}

pub fn process_usage() -> ProcessUsage {
    let (rss_mb, peak_rss_mb) = memory_mb();
    ProcessUsage {
        rss_mb,
        peak_rss_mb,
        cpu_time_s: cpu_time_s(),
    }
}

fn memory_mb() -> (Option<f64>, Option<f64>) {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return (None, None);
    };
    let field = |name: &str| {
        status
            .lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|kb| kb.parse::<f64>().ok())
            .map(|kb| kb / 1024.0)
    };
    (field("VmRSS:"), field("VmHWM:"))
}

fn cpu_time_s() -> Option<f64> {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage only writes into the provided struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return None;
    }
    // SAFETY: initialised by the successful call above.
    let usage = unsafe { usage.assume_init() };
    let secs = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    Some(secs(usage.ru_utime) + secs(usage.ru_stime))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_plausible_usage() {
        let u = process_usage();
        let cpu = u.cpu_time_s.unwrap();
        assert!(cpu >= 0.0);
        if cfg!(target_os = "linux") {
            let (rss, peak) = (u.rss_mb.unwrap(), u.peak_rss_mb.unwrap());
            assert!(rss > 0.0 && peak >= rss, "{rss} {peak}");
        }
    }
}
