//! Chassis interface model: actuator calibration, per-channel priority
//! arbitration, and runstop semantics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{RallyError, Result};

/// Pulse-width calibration for one actuator channel, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorCalibration {
    pub min_us: f64,
    pub center_us: f64,
    pub max_us: f64,
}

impl Default for ActuatorCalibration {
    fn default() -> Self {
        Self {
            min_us: 1000.0,
            center_us: 1500.0,
            max_us: 2000.0,
        }
    }
}

impl ActuatorCalibration {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_us < self.center_us && self.center_us < self.max_us) {
            return Err(RallyError::Config(
                "calibration requires min < center < max".into(),
            ));
        }
        Ok(())
    }
}

/// Piecewise-linear map from a normalized command in [-1, 1] to a pulse
/// width. Out-of-range input is clamped; the clamp is reported so callers
/// can log it.
pub fn calibrate(value: f64, cal: &ActuatorCalibration) -> (f64, bool) {
    let clamped = value.clamp(-1.0, 1.0);
    let pulse = if clamped >= 0.0 {
        cal.center_us + clamped * (cal.max_us - cal.center_us)
    } else {
        cal.center_us + clamped * (cal.center_us - cal.min_us)
    };
    (pulse, clamped != value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Steering,
    Throttle,
    FrontBrake,
}

pub const CHANNELS: [Channel; 3] = [Channel::Steering, Channel::Throttle, Channel::FrontBrake];

/// One controller's actuator request. Channels without a valid value are
/// `None` and never win arbitration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChassisCommand {
    pub sender: String,
    pub steering: Option<f64>,
    pub throttle: Option<f64>,
    pub front_brake: Option<f64>,
    /// Time the command was received (s).
    pub stamp: f64,
}

impl ChassisCommand {
    /// Builds a command with every provided channel range-checked.
    pub fn new(
        sender: impl Into<String>,
        steering: Option<f64>,
        throttle: Option<f64>,
        front_brake: Option<f64>,
        stamp: f64,
    ) -> Result<Self> {
        for v in [steering, throttle].into_iter().flatten() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(RallyError::Domain(format!("command value {v} outside [-1, 1]")));
            }
        }
        if let Some(v) = front_brake {
            if !(0.0..=1.0).contains(&v) {
                return Err(RallyError::Domain(format!("front brake {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            sender: sender.into(),
            steering,
            throttle,
            front_brake,
            stamp,
        })
    }

    fn channel(&self, ch: Channel) -> Option<f64> {
        match ch {
            Channel::Steering => self.steering,
            Channel::Throttle => self.throttle,
            Channel::FrontBrake => self.front_brake,
        }
    }
}

/// Ordered sender list, highest priority first, with a per-sender
/// staleness timeout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityTable {
    /// Highest priority first.
    pub senders: Vec<String>,
    /// Commands older than this are ignored (s).
    pub timeout_s: f64,
}

impl PriorityTable {
    pub fn validate(&self) -> Result<()> {
        if self.senders.is_empty() {
            return Err(RallyError::Config("priority table is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.senders {
            if !seen.insert(s) {
                return Err(RallyError::Config(format!("duplicate sender id {s}")));
            }
        }
        if self.timeout_s <= 0.0 {
            return Err(RallyError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Arbitration result for one actuator channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelOutput {
    pub value: f64,
    /// Winning sender, or `None` when the channel fell back to neutral.
    pub winner: Option<String>,
    pub degraded: bool,
}

/// For each channel independently, the highest-priority fresh command
/// with a valid value wins. Channels with no valid sender output neutral
/// and are flagged degraded.
pub fn arbitrate(
    commands: &[ChassisCommand],
    table: &PriorityTable,
    now: f64,
) -> Result<BTreeMap<Channel, ChannelOutput>> {
    table.validate()?;
    let mut out = BTreeMap::new();
    for ch in CHANNELS {
        let mut winner = None;
        'senders: for sender in &table.senders {
            // Most recent fresh command from this sender with this channel.
            let mut best: Option<&ChassisCommand> = None;
            for cmd in commands {
                if &cmd.sender == sender
                    && cmd.channel(ch).is_some()
                    && now - cmd.stamp <= table.timeout_s
                {
                    if best.map_or(true, |b| cmd.stamp > b.stamp) {
                        best = Some(cmd);
                    }
                }
            }
            if let Some(cmd) = best {
                winner = Some((sender.clone(), cmd.channel(ch).unwrap()));
                break 'senders;
            }
        }
        let output = match winner {
            Some((sender, value)) => ChannelOutput {
                value,
                winner: Some(sender),
                degraded: false,
            },
            None => ChannelOutput {
                value: 0.0,
                winner: None,
                degraded: true,
            },
        };
        out.insert(ch, output);
    }
    Ok(out)
}

/// Motion-enable decision: OR of the most recent flag from each source.
/// A registered source that has not reported yet contributes `false`.
pub fn runstop_enabled(latest: &BTreeMap<String, Option<bool>>) -> Result<bool> {
    if latest.is_empty() {
        return Err(RallyError::Config("no runstop sources registered".into()));
    }
    Ok(latest.values().any(|flag| flag.unwrap_or(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn neutral_maps_to_1500() {
        let (pulse, clamped) = calibrate(0.0, &ActuatorCalibration::default());
        assert_eq!(pulse, 1500.0);
        assert!(!clamped);
    }

    #[test]
    fn endpoints_map_to_limits() {
        let cal = ActuatorCalibration::default();
        assert_eq!(calibrate(-1.0, &cal).0, cal.min_us);
        assert_eq!(calibrate(1.0, &cal).0, cal.max_us);
    }

    #[test]
    fn asymmetric_interpolation() {
        let cal = ActuatorCalibration {
            min_us: 1100.0,
            center_us: 1500.0,
            max_us: 1900.0,
        };
        assert_relative_eq!(calibrate(0.5, &cal).0, 1700.0);
    }

    #[test]
    fn out_of_range_clamps_and_flags() {
        let cal = ActuatorCalibration::default();
        let (pulse, clamped) = calibrate(1.7, &cal);
        assert_eq!(pulse, cal.max_us);
        assert!(clamped);
    }

    #[test]
    fn calibrate_is_monotone() {
        let cal = ActuatorCalibration {
            min_us: 1050.0,
            center_us: 1480.0,
            max_us: 1980.0,
        };
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=200 {
            let v = -1.0 + i as f64 / 100.0;
            let (pulse, _) = calibrate(v, &cal);
            assert!(pulse >= prev);
            prev = pulse;
        }
    }

    fn table() -> PriorityTable {
        PriorityTable {
            senders: vec!["runstop-override".into(), "mppi".into(), "waypoint".into()],
            timeout_s: 0.2,
        }
    }

    #[test]
    fn single_sender_passes_through() {
        let cmds = vec![ChassisCommand::new("mppi", Some(0.2), Some(0.5), Some(0.0), 1.0).unwrap()];
        let out = arbitrate(&cmds, &table(), 1.05).unwrap();
        assert_eq!(out[&Channel::Steering].value, 0.2);
        assert_eq!(out[&Channel::Throttle].value, 0.5);
        assert_eq!(out[&Channel::Steering].winner.as_deref(), Some("mppi"));
    }

    #[test]
    fn mixed_winners_per_channel() {
        let cmds = vec![
            ChassisCommand::new("mppi", Some(0.3), None, None, 1.0).unwrap(),
            ChassisCommand::new("waypoint", None, Some(0.6), None, 1.0).unwrap(),
        ];
        let out = arbitrate(&cmds, &table(), 1.1).unwrap();
        assert_eq!(out[&Channel::Steering].winner.as_deref(), Some("mppi"));
        assert_eq!(out[&Channel::Throttle].winner.as_deref(), Some("waypoint"));
        assert!(out[&Channel::FrontBrake].degraded);
        assert_eq!(out[&Channel::FrontBrake].value, 0.0);
    }

    #[test]
    fn stale_high_priority_loses() {
        let cmds = vec![
            ChassisCommand::new("mppi", Some(0.3), None, None, 0.0).unwrap(),
            ChassisCommand::new("waypoint", Some(-0.4), None, None, 1.0).unwrap(),
        ];
        let out = arbitrate(&cmds, &table(), 1.05).unwrap();
        assert_eq!(out[&Channel::Steering].winner.as_deref(), Some("waypoint"));
        assert_eq!(out[&Channel::Steering].value, -0.4);
    }

    #[test]
    fn winner_priority_dominates_valid_fresh_senders() {
        let cmds = vec![
            ChassisCommand::new("waypoint", Some(-0.4), None, None, 1.0).unwrap(),
            ChassisCommand::new("mppi", Some(0.3), None, None, 1.0).unwrap(),
        ];
        let out = arbitrate(&cmds, &table(), 1.1).unwrap();
        assert_eq!(out[&Channel::Steering].winner.as_deref(), Some("mppi"));
    }

    #[test]
    fn runstop_or_semantics() {
        let mut latest = BTreeMap::new();
        latest.insert("ocs".to_string(), Some(false));
        latest.insert("runstop-box".to_string(), Some(false));
        assert!(!runstop_enabled(&latest).unwrap());
        latest.insert("runstop-box".to_string(), Some(true));
        assert!(runstop_enabled(&latest).unwrap());
    }

    #[test]
    fn missing_source_is_false() {
        let mut latest = BTreeMap::new();
        latest.insert("ocs".to_string(), None);
        assert!(!runstop_enabled(&latest).unwrap());
        latest.insert("runstop-box".to_string(), Some(true));
        assert!(runstop_enabled(&latest).unwrap());
    }

    #[test]
    fn runstop_is_monotone_in_sources() {
        // Flipping any source false -> true never disables motion.
        for mask in 0..8u8 {
            let mut latest = BTreeMap::new();
            for (i, name) in ["a", "b", "c"].iter().enumerate() {
                latest.insert(name.to_string(), Some(mask & (1 << i) != 0));
            }
            let before = runstop_enabled(&latest).unwrap();
            for name in ["a", "b", "c"] {
                let mut flipped = latest.clone();
                flipped.insert(name.to_string(), Some(true));
                assert!(runstop_enabled(&flipped).unwrap() >= before);
            }
        }
    }

    #[test]
    fn command_construction_enforces_ranges() {
        assert!(ChassisCommand::new("x", Some(1.2), None, None, 0.0).is_err());
        assert!(ChassisCommand::new("x", None, None, Some(-0.1), 0.0).is_err());
        assert!(ChassisCommand::new("x", Some(-1.0), Some(1.0), Some(1.0), 0.0).is_ok());
    }
}
