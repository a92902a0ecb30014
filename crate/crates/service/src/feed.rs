//! Per-session event logs behind the server-push stream.
//!
//! Each running session owns an append-only log of the events it produced
//! and an async queue that orders frame processing. A subscriber starts
//! reading at the log length when it connects and walks forward with its
//! own cursor, so it sees every later event exactly once and in order no
//! matter how slowly it reads.

use presencia_core::attendance::{RecognitionEvent, SessionSummary};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use tokio::sync::watch;

#[derive(Debug, Clone, PartialEq)]
pub enum FeedItem {
    Event(Arc<RecognitionEvent>),
    End(SessionSummary),
}

#[derive(Default)]
struct Log {
    events: Vec<Arc<RecognitionEvent>>,
    end: Option<SessionSummary>,
}

pub struct Feed {
    /// Held across process-then-publish so frames of one session are
    /// handled one at a time, in arrival order.
    pub queue: tokio::sync::Mutex<()>,
    log: Mutex<Log>,
    version: watch::Sender<u64>,
}

impl Default for Feed {
    fn default() -> Self {
        Feed { queue: tokio::sync::Mutex::new(()), log: Mutex::default(), version: watch::Sender::new(0) }
    }
}

impl Feed {
    fn log(&self) -> MutexGuard<'_, Log> {
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn publish(&self, events: &[RecognitionEvent]) {
        if events.is_empty() {
            return;
        }
        self.log().events.extend(events.iter().cloned().map(Arc::new));
        self.version.send_modify(|v| *v += 1);
    }

    pub fn close(&self, summary: SessionSummary) {
        self.log().end = Some(summary);
        self.version.send_modify(|v| *v += 1);
    }

    /// A reader positioned after every event published so far.
    pub fn subscribe(self: &Arc<Self>) -> Subscriber {
        let wake = self.version.subscribe();
        let cursor = self.log().events.len();
        Subscriber { feed: self.clone(), wake, cursor, done: false }
    }
}

pub struct Subscriber {
    feed: Arc<Feed>,
    wake: watch::Receiver<u64>,
    cursor: usize,
    done: bool,
}

impl Subscriber {
    /// The next item, or `None` once the end marker has been delivered.
    pub async fn next(&mut self) -> Option<FeedItem> {
        loop {
            if self.done {
                return None;
            }
            {
                let log = self.feed.log();
                if let Some(e) = log.events.get(self.cursor) {
                    self.cursor += 1;
                    return Some(FeedItem::Event(e.clone()));
                }
                if let Some(summary) = log.end {
                    self.done = true;
                    return Some(FeedItem::End(summary));
                }
            }
            if self.wake.changed().await.is_err() {
                return None;
            }
        }
    }
}

/// Feeds of the sessions seen since startup, keyed by session id.
#[derive(Default)]
pub struct Feeds {
    map: Mutex<HashMap<String, Arc<Feed>>>,
}

impl Feeds {
    pub fn get_or_create(&self, session_id: &str) -> Arc<Feed> {
        self.map.lock().unwrap_or_else(|e| e.into_inner()).entry(session_id.to_string()).or_default().clone()
    }

    pub fn remove(&self, session_id: &str) {
        self.map.lock().unwrap_or_else(|e| e.into_inner()).remove(session_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use presencia_core::image::Rect;

    fn event(seq: u64) -> RecognitionEvent {
        RecognitionEvent {
            session_id: "s".into(),
            seq,
            face_box: Rect::new(0, 0, 1, 1),
            person_id: None,
            name: None,
            top_prob: 0.5,
            timestamp: Utc.timestamp_opt(seq as i64, 0).unwrap(),
            marked: false,
        }
    }

    fn seqs(items: &[FeedItem]) -> Vec<u64> {
        items
            .iter()
            .filter_map(|i| match i {
                FeedItem::Event(e) => Some(e.seq),
                FeedItem::End(_) => None,
            })
            .collect()
    }

    #[tokio::test]
    async fn late_subscribers_only_see_later_events() {
        let feed = Arc::new(Feed::default());
        feed.publish(&[event(0), event(1)]);
        let mut sub = feed.subscribe();
        feed.publish(&[event(2)]);
        feed.publish(&[event(3), event(4)]);
        feed.close(SessionSummary { persons_marked: 0, total_events: 5 });
        let mut got = Vec::new();
        while let Some(item) = sub.next().await {
            got.push(item);
        }
        assert_eq!(seqs(&got), [2, 3, 4]);
        assert!(matches!(got.last(), Some(FeedItem::End(s)) if s.total_events == 5));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn slow_and_fast_readers_each_get_everything_once() {
        let feed = Arc::new(Feed::default());
        let readers: Vec<_> = (0..4)
            .map(|r| {
                let mut sub = feed.subscribe();
                tokio::spawn(async move {
                    let mut got = Vec::new();
                    while let Some(item) = sub.next().await {
                        if r == 0 {
                            tokio::task::yield_now().await;
                        }
                        got.push(item);
                    }
                    got
                })
            })
            .collect();
        for chunk in (0..500u64).collect::<Vec<_>>().chunks(3) {
            feed.publish(&chunk.iter().map(|&s| event(s)).collect::<Vec<_>>());
            tokio::task::yield_now().await;
        }
        feed.close(SessionSummary { persons_marked: 0, total_events: 500 });
        for r in readers {
            assert_eq!(seqs(&r.await.unwrap()), (0..500).collect::<Vec<_>>());
        }
    }
}
