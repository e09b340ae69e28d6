use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, OperatorTag};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TagUsage {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Per-operator call and token counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub by_tag: BTreeMap<OperatorTag, TagUsage>,
}

impl UsageLedger {
    pub fn get(&self, tag: OperatorTag) -> TagUsage {
        self.by_tag.get(&tag).copied().unwrap_or_default()
    }

    pub fn calls(&self, tag: OperatorTag) -> u64 {
        self.get(tag).calls
    }

    pub fn total_tokens(&self) -> u64 {
        self.by_tag.values().map(TagUsage::tokens).sum()
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &UsageLedger) -> UsageLedger {
        let by_tag = OperatorTag::ALL
            .iter()
            .map(|&tag| {
                let now = self.get(tag);
                let then = earlier.get(tag);
                let delta = TagUsage {
                    calls: now.calls - then.calls,
                    prompt_tokens: now.prompt_tokens - then.prompt_tokens,
                    completion_tokens: now.completion_tokens - then.completion_tokens,
                };
                (tag, delta)
            })
            .collect();
        UsageLedger { by_tag }
    }

    /// `actor=12;critic=3;...` in fixed tag order.
    pub fn tokens_by_tag(&self) -> String {
        OperatorTag::ALL
            .iter()
            .map(|&tag| format!("{tag}={}", self.get(tag).tokens()))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Counts every call and its tokens under the request's operator tag.
pub struct Metered<B> {
    inner: B,
    ledger: Mutex<UsageLedger>,
}

impl<B: ChatBackend> Metered<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            ledger: Mutex::new(UsageLedger::default()),
        }
    }

    pub fn snapshot(&self) -> UsageLedger {
        self.ledger.lock().unwrap().clone()
    }
}

impl<B: ChatBackend> ChatBackend for Metered<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let result = self.inner.complete(request);
        let mut ledger = self.ledger.lock().unwrap();
        let entry = ledger.by_tag.entry(request.tag).or_default();
        entry.calls += 1;
        if let Ok(r) = &result {
            entry.prompt_tokens += r.usage.prompt_tokens;
            entry.completion_tokens += r.usage.completion_tokens;
        }
        result
    }
}

/// Keeps every request and its reply, in completion order.
pub struct Recording<B> {
    inner: B,
    log: Mutex<Vec<(ChatRequest, Result<ChatResponse, BackendError>)>>,
}

impl<B: ChatBackend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log
            .lock()
            .unwrap()
            .iter()
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn requests_tagged(&self, tag: OperatorTag) -> Vec<ChatRequest> {
        self.requests()
            .into_iter()
            .filter(|r| r.tag == tag)
            .collect()
    }

    pub fn responses_tagged(&self, tag: OperatorTag) -> Vec<String> {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|(r, _)| r.tag == tag)
            .filter_map(|(_, resp)| resp.as_ref().ok().map(|r| r.text.clone()))
            .collect()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

impl<B: ChatBackend> ChatBackend for Recording<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let result = self.inner.complete(request);
        self.log
            .lock()
            .unwrap()
            .push((request.clone(), result.clone()));
        result
    }
}

/// Bounds the number of requests in flight at once.
pub struct ConcurrencyLimit<B> {
    inner: B,
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<B: ChatBackend> ConcurrencyLimit<B> {
    pub fn new(inner: B, max: usize) -> Self {
        Self {
            inner,
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for ConcurrencyLimit<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.max {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let result = self.inner.complete(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        result
    }
}
