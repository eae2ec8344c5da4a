//! Per-UAV telemetry fan-out.
//!
//! Each UAV gets its own broadcast channel. A subscriber that falls more than
//! `capacity` records behind is sent one final JSON line explaining why and is
//! disconnected, so a slow consumer never stalls the publisher.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use bytes::Bytes;
use futures::{Stream, StreamExt};
use poiloc_core::telemetry::{self, OrderTracker, StreamErrorKind};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

/// Longest accepted telemetry line; longer input is rejected, not buffered.
pub const MAX_LINE_BYTES: usize = 64 * 1024;
/// Rejections listed individually in an ingest report.
const MAX_REPORTED_REJECTIONS: usize = 100;

pub struct UavChannel {
    tx: broadcast::Sender<Bytes>,
    // Held across check-and-send so per-UAV order survives concurrent publishers.
    order: Mutex<OrderTracker>,
}

impl UavChannel {
    /// Records currently retained for lagging subscribers.
    pub fn buffered(&self) -> usize {
        self.tx.len()
    }

    pub fn subscriber_count(&self) -> usize {
        self.tx.receiver_count()
    }
}

#[derive(Default)]
pub struct HubCounters {
    pub accepted: AtomicU64,
    pub rejected: AtomicU64,
    pub dropped_subscribers: AtomicU64,
}

pub struct StreamHub {
    capacity: usize,
    channels: RwLock<HashMap<String, Arc<UavChannel>>>,
    pub counters: HubCounters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub error: String,
}

/// Summary returned when a publish connection ends.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: u64,
    pub rejected_count: u64,
    /// The first rejections, with 1-based line numbers.
    pub rejected: Vec<Rejection>,
}

/// Final line sent to a subscriber that was disconnected for lagging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisconnectNotice {
    pub error: String,
    pub message: String,
    pub missed: u64,
}

impl StreamHub {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            channels: RwLock::new(HashMap::new()),
            counters: HubCounters::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Returns the channel for `uav_id`, creating it on first use.
    pub fn register(&self, uav_id: &str) -> Arc<UavChannel> {
        if let Some(c) = self.get(uav_id) {
            return c;
        }
        let mut map = self.channels.write().unwrap_or_else(|p| p.into_inner());
        map.entry(uav_id.to_string())
            .or_insert_with(|| {
                Arc::new(UavChannel {
                    tx: broadcast::channel(self.capacity).0,
                    order: Mutex::new(OrderTracker::new()),
                })
            })
            .clone()
    }

    pub fn get(&self, uav_id: &str) -> Option<Arc<UavChannel>> {
        self.channels.read().unwrap_or_else(|p| p.into_inner()).get(uav_id).cloned()
    }

    pub fn uav_count(&self) -> usize {
        self.channels.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Decodes, validates and publishes one line. Blank lines are ignored.
    pub fn publish_line(&self, channel: &UavChannel, uav_id: &str, line: &[u8]) -> Result<bool, String> {
        let text = std::str::from_utf8(line).map_err(|e| format!("invalid UTF-8: {e}"))?;
        let text = text.trim();
        if text.is_empty() {
            return Ok(false);
        }
        let meta = telemetry::decode(text).map_err(|e| e.to_string())?;
        if meta.uav_id != uav_id {
            return Err(format!("record uav_id {:?} does not match stream {uav_id:?}", meta.uav_id));
        }
        let mut encoded = telemetry::encode(&meta).into_bytes();
        encoded.push(b'\n');
        let mut order = channel.order.lock().unwrap_or_else(|p| p.into_inner());
        order.check(&meta).map_err(|e: StreamErrorKind| e.to_string())?;
        // No subscribers is not an error; the record is simply not retained.
        let _ = channel.tx.send(Bytes::from(encoded));
        Ok(true)
    }

    /// Publishes every line of a chunked body, skipping and reporting bad lines.
    pub async fn ingest<S, E>(&self, uav_id: &str, mut body: S) -> Result<IngestReport, E>
    where
        S: Stream<Item = Result<Bytes, E>> + Unpin,
    {
        let channel = self.register(uav_id);
        let mut report = IngestReport::default();
        let mut buf: Vec<u8> = Vec::new();
        let mut line_no = 0usize;
        let mut skipping_long = false;

        let handle = |line: &[u8], line_no: usize, report: &mut IngestReport| {
            match self.publish_line(&channel, uav_id, line) {
                Ok(true) => {
                    report.accepted += 1;
                    self.counters.accepted.fetch_add(1, Ordering::Relaxed);
                }
                Ok(false) => {}
                Err(error) => reject(self, report, line_no, error),
            }
        };

        while let Some(chunk) = body.next().await {
            let chunk = chunk?;
            let mut rest: &[u8] = &chunk;
            while let Some(pos) = rest.iter().position(|&b| b == b'\n') {
                line_no += 1;
                if skipping_long {
                    skipping_long = false;
                } else {
                    buf.extend_from_slice(&rest[..pos]);
                    handle(&buf, line_no, &mut report);
                }
                buf.clear();
                rest = &rest[pos + 1..];
            }
            if !skipping_long {
                buf.extend_from_slice(rest);
                if buf.len() > MAX_LINE_BYTES {
                    reject(self, &mut report, line_no + 1, format!("line exceeds {MAX_LINE_BYTES} bytes"));
                    buf.clear();
                    skipping_long = true;
                }
            }
        }
        if !skipping_long && !buf.is_empty() {
            line_no += 1;
            handle(&buf, line_no, &mut report);
        }
        Ok(report)
    }

    /// Live tail of `uav_id` as newline-terminated records, or `None` if the
    /// UAV has never published.
    pub fn subscribe(self: &Arc<Self>, uav_id: &str) -> Option<impl Stream<Item = Bytes> + Send + 'static> {
        let rx = self.get(uav_id)?.tx.subscribe();
        let hub = self.clone();
        let capacity = self.capacity;
        Some(futures::stream::unfold(Some(rx), move |rx| {
            let hub = hub.clone();
            async move {
                let mut rx = rx?;
                match rx.recv().await {
                    Ok(line) => Some((line, Some(rx))),
                    Err(broadcast::error::RecvError::Lagged(missed)) => {
                        hub.counters.dropped_subscribers.fetch_add(1, Ordering::Relaxed);
                        let notice = DisconnectNotice {
                            error: "slow_consumer".into(),
                            message: format!(
                                "subscriber fell {missed} records behind the {capacity}-record buffer and was disconnected"
                            ),
                            missed,
                        };
                        let mut line = serde_json::to_vec(&notice).expect("notice serializes");
                        line.push(b'\n');
                        Some((Bytes::from(line), None))
                    }
                    Err(broadcast::error::RecvError::Closed) => None,
                }
            }
        }))
    }
}

fn reject(hub: &StreamHub, report: &mut IngestReport, line: usize, error: String) {
    report.rejected_count += 1;
    hub.counters.rejected.fetch_add(1, Ordering::Relaxed);
    if report.rejected.len() < MAX_REPORTED_REJECTIONS {
        report.rejected.push(Rejection { line, error });
    }
}
