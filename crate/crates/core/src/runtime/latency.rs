//! Additive channel model: `total = transfer + client + server`, with
//! `transfer = bits / rate`.

use serde::{Deserialize, Serialize};

use super::RuntimeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    /// Bits per second.
    pub data_rate: f64,
}

impl ChannelProfile {
    pub fn new(name: &str, mbps: f64) -> Result<Self, RuntimeError> {
        let p = ChannelProfile {
            name: name.to_string(),
            data_rate: mbps * 1e6,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.data_rate > 0.0 && self.data_rate.is_finite() {
            Ok(())
        } else {
            Err(RuntimeError::ZeroRate(self.name.clone()))
        }
    }
}

/// BLE, 4G, Wi-Fi and 5G at 0.27, 12, 54 and 66.9 Mbps.
pub fn standard_profiles() -> Vec<ChannelProfile> {
    [("BLE", 0.27), ("4G", 12.0), ("Wi-Fi", 54.0), ("5G", 66.9)]
        .iter()
        .map(|&(n, r)| ChannelProfile::new(n, r).expect("positive rate"))
        .collect()
}

pub fn transfer_time_ms(payload_bits: f64, profile: &ChannelProfile) -> Result<f64, RuntimeError> {
    profile.validate()?;
    Ok(payload_bits / profile.data_rate * 1e3)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PayloadStats {
    pub mean_bytes: f64,
    pub median_bytes: f64,
}

impl PayloadStats {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        if sizes.is_empty() {
            return Self::default();
        }
        let mut s = sizes.to_vec();
        s.sort_unstable();
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2] as f64
        } else {
            (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
        };
        PayloadStats {
            mean_bytes: s.iter().sum::<usize>() as f64 / n as f64,
            median_bytes: median,
        }
    }
}

/// Per-request compute costs in milliseconds. `coding_ms` is the share of
/// client plus server time spent in entropy coding.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeCost {
    pub client_ms: f64,
    pub server_ms: f64,
    pub coding_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub channel: String,
    pub config: String,
    pub transfer_ms: f64,
    pub client_ms: f64,
    pub server_ms: f64,
    pub total_ms: f64,
    pub total_excl_coding_ms: f64,
    pub mean_payload_bytes: f64,
    pub median_payload_bytes: f64,
}

impl LatencyRow {
    pub fn additive(channel: &str, config: &str, transfer_ms: f64, cost: &ComputeCost, payload: &PayloadStats) -> Self {
        let total = transfer_ms + cost.client_ms + cost.server_ms;
        LatencyRow {
            channel: channel.to_string(),
            config: config.to_string(),
            transfer_ms,
            client_ms: cost.client_ms,
            server_ms: cost.server_ms,
            total_ms: total,
            total_excl_coding_ms: total - cost.coding_ms,
            mean_payload_bytes: payload.mean_bytes,
            median_payload_bytes: payload.median_bytes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

pub const LATENCY_CSV_HEADER: &str =
    "channel,transfer_ms,client_ms,server_ms,total_ms,config,total_excl_coding_ms,mean_payload_bytes,median_payload_bytes";

/// A named configuration: mean payload plus compute cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub name: String,
    pub payload: PayloadStats,
    pub cost: ComputeCost,
}

/// One row per `(profile, config)`, transfer from the mean payload size.
pub fn latency_report(configs: &[LatencyConfig], profiles: &[ChannelProfile]) -> Result<LatencyReport, RuntimeError> {
    let mut rows = Vec::new();
    for p in profiles {
        for c in configs {
            let t = transfer_time_ms(c.payload.mean_bytes * 8.0, p)?;
            rows.push(LatencyRow::additive(&p.name, &c.name, t, &c.cost, &c.payload));
        }
    }
    Ok(LatencyReport { rows })
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LATENCY_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{},{:.4},{:.2},{:.2}\n",
                r.channel,
                r.transfer_ms,
                r.client_ms,
                r.server_ms,
                r.total_ms,
                r.config,
                r.total_excl_coding_ms,
                r.mean_payload_bytes,
                r.median_payload_bytes
            ));
        }
        s
    }

    pub fn row(&self, channel: &str, config: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.channel == channel && r.config == config)
    }

    /// `total(baseline) / total(config)` on one channel.
    pub fn speedup(&self, channel: &str, baseline: &str, config: &str) -> Option<f64> {
        Some(self.row(channel, baseline)?.total_ms / self.row(channel, config)?.total_ms)
    }
}

/// Published transfer times (ms) for the two bottleneck configurations
/// over the four standard channels, and the compute constant common to
/// them: `(channel, config, transfer_ms)`.
pub const PUBLISHED_TRANSFER_MS: [(&str, &str, f64); 8] = [
    ("BLE", "sgfp-0.23", 142.59),
    ("BLE", "sgfp-ll", 209.89),
    ("4G", "sgfp-0.23", 3.21),
    ("4G", "sgfp-ll", 4.72),
    ("Wi-Fi", "sgfp-0.23", 0.71),
    ("Wi-Fi", "sgfp-ll", 1.05),
    ("5G", "sgfp-0.23", 0.58),
    ("5G", "sgfp-ll", 0.85),
];

/// Client plus server compute implied by the published totals.
pub const PUBLISHED_COMPUTE_MS: f64 = 17.885;

/// Rows built verbatim from [`PUBLISHED_TRANSFER_MS`] and [`PUBLISHED_COMPUTE_MS`].
pub fn published_input_report() -> LatencyReport {
    let cost = ComputeCost {
        client_ms: 0.0,
        server_ms: PUBLISHED_COMPUTE_MS,
        coding_ms: 0.0,
    };
    LatencyReport {
        rows: PUBLISHED_TRANSFER_MS
            .iter()
            .map(|&(ch, cfg, t)| LatencyRow::additive(ch, cfg, t, &cost, &PayloadStats::default()))
            .collect(),
    }
}
