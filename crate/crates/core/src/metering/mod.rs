//! Token metering and per-course budgets.
//!
//! Requests go through a reserve/settle protocol: the worst-case cost (the
//! prompt estimate plus `max_tokens` of completion) is reserved up front, and
//! the actual cost is charged when the upstream reports usage. As long as
//! upstreams stay within the reservation, `spent` can never exceed `limit`.

mod report;

pub use report::{format_count, format_millions, render_table, ClassTotals, ReportDisplay, TokenMatrix, UsageReport};

use std::collections::HashMap;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::persistence::{canonical_json, Keyspace, Store};

/// 1 credit = 10^6 microcredits.
pub const MICROCREDITS_PER_CREDIT: u64 = 1_000_000;

/// Number of maximal runs of non-whitespace characters.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendClass {
    SelfHosted,
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub course_id: String,
    pub limit_microcredits: u64,
    pub spent_microcredits: u64,
    pub reserved_microcredits: u64,
}

impl Budget {
    pub fn new(course_id: impl Into<String>) -> Self {
        Self {
            course_id: course_id.into(),
            limit_microcredits: 0,
            spent_microcredits: 0,
            reserved_microcredits: 0,
        }
    }

    /// limit − spent − reserved, floored at zero.
    pub fn available(&self) -> u64 {
        self.limit_microcredits
            .saturating_sub(self.spent_microcredits)
            .saturating_sub(self.reserved_microcredits)
    }
}

pub(crate) fn budget_key(course_id: &str) -> String {
    format!("budget:{course_id}")
}

/// Persists a zero budget for a new course.
pub fn create_budget(store: &Store, course_id: &str) -> Result<Budget> {
    let budget = Budget::new(course_id);
    store.put_json(Keyspace::Budgets, &budget_key(course_id), 0, &budget)?;
    Ok(budget)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Price {
    pub model: String,
    pub input_per_1k_tokens: u64,
    pub output_per_1k_tokens: u64,
}

impl Price {
    pub fn free(model: impl Into<String>) -> Self {
        Self { model: model.into(), input_per_1k_tokens: 0, output_per_1k_tokens: 0 }
    }

    /// ceil(prompt × in / 1000) + ceil(completion × out / 1000).
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> u64 {
        fn part(tokens: u64, per_1k: u64) -> u128 {
            (u128::from(tokens) * u128::from(per_1k)).div_ceil(1000)
        }
        let total = part(prompt_tokens, self.input_per_1k_tokens)
            + part(completion_tokens, self.output_per_1k_tokens);
        u64::try_from(total).unwrap_or(u64::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub id: String,
    pub course_id: String,
    pub key_id: String,
    pub model: String,
    pub amount: u64,
    /// Price captured at reservation time so settlement is not affected by
    /// later price changes.
    pub price: Price,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub timestamp_utc: DateTime<Utc>,
    pub key_id: String,
    pub course_id: String,
    pub model: String,
    pub backend_class: BackendClass,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_microcredits: u64,
    pub api_calls: u64,
    /// Actual cost exceeded the reservation (non-compliant upstream).
    #[serde(default)]
    pub overshoot: bool,
}

pub struct Metering {
    store: Store,
    prices: RwLock<HashMap<String, Price>>,
    outstanding: Mutex<HashMap<String, Reservation>>,
    ledger: RwLock<Vec<LedgerEntry>>,
}

impl std::fmt::Debug for Metering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metering")
            .field("outstanding", &self.outstanding.lock().len())
            .field("ledger_len", &self.ledger.read().len())
            .finish()
    }
}

impl Metering {
    /// Loads prices and the ledger. Reservations never outlive the process,
    /// so any reserved amount left in a stored budget is released here.
    pub fn open(store: Store) -> Result<Self> {
        let mut prices = HashMap::new();
        for (_, record) in store.scan_prefix(Keyspace::Backends, "price:") {
            let price: Price = serde_json::from_slice(&record.body)?;
            prices.insert(price.model.clone(), price);
        }
        let ledger = store
            .scan(Keyspace::Ledger)
            .into_iter()
            .map(|(_, r)| serde_json::from_slice(&r.body))
            .collect::<std::result::Result<Vec<LedgerEntry>, _>>()?;
        for key in store.list_prefix(Keyspace::Budgets, "budget:") {
            store.modify_json::<Budget, _>(Keyspace::Budgets, &key, |b| {
                let mut b = b.ok_or_else(|| Error::not_found(key.clone()))?;
                b.reserved_microcredits = 0;
                Ok(b)
            })?;
        }
        Ok(Self {
            store,
            prices: RwLock::new(prices),
            outstanding: Mutex::new(HashMap::new()),
            ledger: RwLock::new(ledger),
        })
    }

    pub fn set_price(&self, price: Price) -> Result<()> {
        let key = format!("price:{}", price.model);
        let expected = self.store.try_get(Keyspace::Backends, &key).map_or(0, |r| r.version);
        self.store.put_json(Keyspace::Backends, &key, expected, &price)?;
        self.prices.write().insert(price.model.clone(), price);
        Ok(())
    }

    pub fn price(&self, model: &str) -> Result<Price> {
        self.prices
            .read()
            .get(model)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("price for model {model}")))
    }

    pub fn budget(&self, course_id: &str) -> Result<Budget> {
        Ok(self.store.get_json::<Budget>(Keyspace::Budgets, &budget_key(course_id))?.1)
    }

    fn update_budget<F>(&self, course_id: &str, mut f: F) -> Result<Budget>
    where
        F: FnMut(Budget) -> Result<Budget>,
    {
        let key = budget_key(course_id);
        let (_, budget) = self.store.modify_json::<Budget, _>(Keyspace::Budgets, &key, |b| {
            f(b.ok_or_else(|| Error::not_found(format!("budget for course {course_id}")))?)
        })?;
        Ok(budget)
    }

    pub fn reserve(
        &self,
        course_id: &str,
        key_id: &str,
        model: &str,
        prompt_tokens_est: u64,
        max_tokens: u64,
    ) -> Result<Reservation> {
        let price = self.price(model)?;
        let amount = price.cost(prompt_tokens_est, max_tokens);
        self.update_budget(course_id, |mut b| {
            let committed = u128::from(b.spent_microcredits)
                + u128::from(b.reserved_microcredits)
                + u128::from(amount);
            if committed > u128::from(b.limit_microcredits) {
                return Err(Error::InsufficientBudget { requested: amount, available: b.available() });
            }
            b.reserved_microcredits += amount;
            Ok(b)
        })?;
        let reservation = Reservation {
            id: Uuid::new_v4().to_string(),
            course_id: course_id.to_string(),
            key_id: key_id.to_string(),
            model: model.to_string(),
            amount,
            price,
        };
        self.outstanding.lock().insert(reservation.id.clone(), reservation.clone());
        debug!(course_id, model, amount, "reserved");
        Ok(reservation)
    }

    fn take(&self, reservation_id: &str) -> Result<Reservation> {
        self.outstanding
            .lock()
            .remove(reservation_id)
            .ok_or_else(|| Error::not_found(format!("reservation {reservation_id}")))
    }

    pub fn settle(
        &self,
        reservation_id: &str,
        prompt_tokens: u64,
        completion_tokens: u64,
        backend_class: BackendClass,
    ) -> Result<LedgerEntry> {
        let reservation = self.take(reservation_id)?;
        let cost = reservation.price.cost(prompt_tokens, completion_tokens);
        self.update_budget(&reservation.course_id, |mut b| {
            b.reserved_microcredits = b.reserved_microcredits.saturating_sub(reservation.amount);
            b.spent_microcredits = b.spent_microcredits.saturating_add(cost);
            Ok(b)
        })?;
        let overshoot = cost > reservation.amount;
        if overshoot {
            warn!(
                course_id = %reservation.course_id,
                reserved = reservation.amount,
                cost,
                "upstream usage exceeded reservation"
            );
        }
        let entry = LedgerEntry {
            id: Uuid::new_v4().to_string(),
            timestamp_utc: Utc::now(),
            key_id: reservation.key_id,
            course_id: reservation.course_id,
            model: reservation.model,
            backend_class,
            prompt_tokens,
            completion_tokens,
            cost_microcredits: cost,
            api_calls: 1,
            overshoot,
        };
        let mut ledger = self.ledger.write();
        self.store.append(Keyspace::Ledger, canonical_json(&entry)?)?;
        ledger.push(entry.clone());
        Ok(entry)
    }

    pub fn cancel(&self, reservation_id: &str) -> Result<()> {
        let reservation = self.take(reservation_id)?;
        self.update_budget(&reservation.course_id, |mut b| {
            b.reserved_microcredits = b.reserved_microcredits.saturating_sub(reservation.amount);
            Ok(b)
        })?;
        Ok(())
    }

    pub fn is_outstanding(&self, reservation_id: &str) -> bool {
        self.outstanding.lock().contains_key(reservation_id)
    }

    pub fn outstanding_count(&self) -> usize {
        self.outstanding.lock().len()
    }

    pub fn add_funds(&self, course_id: &str, amount: u64) -> Result<Budget> {
        self.update_budget(course_id, |mut b| {
            b.limit_microcredits = b
                .limit_microcredits
                .checked_add(amount)
                .ok_or_else(|| Error::validation("budget limit overflow"))?;
            Ok(b)
        })
    }

    pub fn set_limit(&self, course_id: &str, limit: u64) -> Result<Budget> {
        self.update_budget(course_id, |mut b| {
            let committed = b.spent_microcredits.saturating_add(b.reserved_microcredits);
            if limit < committed {
                return Err(Error::validation(format!(
                    "limit {limit} is below spent + reserved ({committed})"
                )));
            }
            b.limit_microcredits = limit;
            Ok(b)
        })
    }

    /// Snapshot of ledger entries, optionally restricted to one course.
    pub fn entries(&self, course_id: Option<&str>) -> Vec<LedgerEntry> {
        self.ledger
            .read()
            .iter()
            .filter(|e| course_id.map_or(true, |c| e.course_id == c))
            .cloned()
            .collect()
    }

    /// Sums entries with `from <= timestamp < to`.
    pub fn aggregate(
        &self,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
        course_id: Option<&str>,
    ) -> Result<UsageReport> {
        if from >= to {
            return Err(Error::validation("report period must satisfy from < to"));
        }
        let ledger = self.ledger.read();
        let entries = ledger
            .iter()
            .filter(|e| e.timestamp_utc >= from && e.timestamp_utc < to)
            .filter(|e| course_id.map_or(true, |c| e.course_id == c));
        Ok(UsageReport::from_entries(from, to, course_id, entries))
    }
}
