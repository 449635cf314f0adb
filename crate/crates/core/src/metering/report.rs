use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{BackendClass, LedgerEntry};

/// One row of the report: a value per backend class plus their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub self_hosted: u64,
    pub proxy: u64,
    pub total: u64,
}

impl ClassTotals {
    fn add(&mut self, class: BackendClass, value: u64) {
        match class {
            BackendClass::SelfHosted => self.self_hosted += value,
            BackendClass::Proxy => self.proxy += value,
        }
        self.total += value;
    }

    fn sum(a: &ClassTotals, b: &ClassTotals) -> ClassTotals {
        ClassTotals {
            self_hosted: a.self_hosted + b.self_hosted,
            proxy: a.proxy + b.proxy,
            total: a.total + b.total,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMatrix {
    pub prompt: ClassTotals,
    pub completion: ClassTotals,
    pub total: ClassTotals,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplayRow {
    pub self_hosted: String,
    pub proxy: String,
    pub total: String,
}

/// Human-readable rendering: tokens in millions, calls with separators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDisplay {
    pub prompt: DisplayRow,
    pub completion: DisplayRow,
    pub total: DisplayRow,
    pub api_calls: DisplayRow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub period: Period,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub course_id: Option<String>,
    pub tokens: TokenMatrix,
    pub api_calls: ClassTotals,
    pub display: ReportDisplay,
}

impl UsageReport {
    pub fn from_entries<'a>(
        from: DateTime<Utc>,
        to: DateTime<Utc>,
        course_id: Option<&str>,
        entries: impl IntoIterator<Item = &'a LedgerEntry>,
    ) -> Self {
        let mut prompt = ClassTotals::default();
        let mut completion = ClassTotals::default();
        let mut api_calls = ClassTotals::default();
        for e in entries {
            prompt.add(e.backend_class, e.prompt_tokens);
            completion.add(e.backend_class, e.completion_tokens);
            api_calls.add(e.backend_class, e.api_calls);
        }
        let tokens = TokenMatrix { prompt, completion, total: ClassTotals::sum(&prompt, &completion) };
        let millions = |r: &ClassTotals| DisplayRow {
            self_hosted: format_millions(r.self_hosted),
            proxy: format_millions(r.proxy),
            total: format_millions(r.total),
        };
        let display = ReportDisplay {
            prompt: millions(&tokens.prompt),
            completion: millions(&tokens.completion),
            total: millions(&tokens.total),
            api_calls: DisplayRow {
                self_hosted: format_count(api_calls.self_hosted),
                proxy: format_count(api_calls.proxy),
                total: format_count(api_calls.total),
            },
        };
        Self {
            period: Period { from, to },
            course_id: course_id.map(str::to_owned),
            tokens,
            api_calls,
            display,
        }
    }
}

/// `n / 10^6` rounded half-up to two decimals, suffixed with `M`.
pub fn format_millions(n: u64) -> String {
    let hundredths = (u128::from(n) + 5_000) / 10_000;
    format!("{}.{:02}M", hundredths / 100, hundredths % 100)
}

/// Decimal with comma thousands separators.
pub fn format_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Fixed-width text grid of the report's display block.
pub fn render_table(report: &UsageReport) -> String {
    let d = &report.display;
    let rows = [
        ("Prompt", &d.prompt),
        ("Completion", &d.completion),
        ("Total", &d.total),
        ("API Calls", &d.api_calls),
    ];
    let mut out = format!("{:<12}{:>14}{:>14}{:>14}\n", "", "Self-hosted", "Proxy", "Total");
    for (label, row) in rows {
        out.push_str(&format!(
            "{:<12}{:>14}{:>14}{:>14}\n",
            label, row.self_hosted, row.proxy, row.total
        ));
    }
    out
}
