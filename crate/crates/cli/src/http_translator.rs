//! Round-trip translation over a plain-text HTTP service.
//!
//! Protocol: `POST {endpoint}?source=<lang>&target=<lang>` with a UTF-8
//! text/plain body; the response body is the translated text. Requests are
//! retried with a short linear backoff before giving up.

use std::time::Duration;

use pcl_core::augment::Translator;

pub struct HttpTranslator {
    client: reqwest::blocking::Client,
    endpoint: String,
    pivot: String,
    retries: u32,
}

impl HttpTranslator {
    pub fn new(
        endpoint: String,
        pivot: String,
        timeout: Duration,
        retries: u32,
    ) -> anyhow::Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()?;
        Ok(HttpTranslator {
            client,
            endpoint,
            pivot,
            retries,
        })
    }

    fn translate(&self, text: &str, source: &str, target: &str) -> Result<String, String> {
        let mut last_error = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            let response = self
                .client
                .post(&self.endpoint)
                .query(&[("source", source), ("target", target)])
                .header("content-type", "text/plain; charset=utf-8")
                .body(text.to_string())
                .send();
            match response {
                Ok(resp) if resp.status().is_success() => {
                    return resp.text().map_err(|e| e.to_string());
                }
                Ok(resp) => last_error = format!("HTTP {}", resp.status()),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(format!(
            "{last_error} (after {} attempts)",
            self.retries + 1
        ))
    }
}

impl Translator for HttpTranslator {
    fn forward(&self, text: &str) -> Result<String, String> {
        self.translate(text, "en", &self.pivot)
    }

    fn backward(&self, text: &str) -> Result<String, String> {
        self.translate(text, &self.pivot, "en")
    }
}
