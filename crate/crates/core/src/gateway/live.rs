use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adapter::{AdapterRegistry, ProviderFailure, WireAdapter};
use super::ratelimit::TokenBucket;
use super::{strip_trailing_newlines, GatewayError, LmmExchange, LmmProvider, LmmRequest, ProviderConfig, ProviderKind};
use crate::http::{Transport, UreqTransport};

/// Environment variable that, when `1`, makes every live call fail.
pub const NO_NETWORK_ENV: &str = "NO_NETWORK";

const JITTER_FRACTION: f64 = 0.2;

/// `base * 2^attempt`, scaled by `1 + 0.2 * jitter` with `jitter` in [-1, 1].
pub fn backoff_delay(base_ms: u64, attempt: u32, jitter: f64) -> Duration {
    let nominal = base_ms as f64 * 2f64.powi(attempt.min(30) as i32);
    Duration::from_secs_f64(nominal * (1.0 + JITTER_FRACTION * jitter.clamp(-1.0, 1.0)) / 1000.0)
}

/// Counting semaphore bounding in-flight calls.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn take(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|p| p.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Calls a remote provider through a wire adapter, with a token-bucket gate,
/// bounded concurrency and jittered exponential backoff on transient errors.
pub struct LiveProvider {
    config: ProviderConfig,
    adapter: Arc<dyn WireAdapter>,
    transport: Arc<dyn Transport>,
    api_key: String,
    limiter: TokenBucket,
    slots: Slots,
    rng: Mutex<ChaCha8Rng>,
    network_disabled: bool,
}

impl LiveProvider {
    /// Reads the API key from the environment variable named by
    /// `credential_ref`, and honours `NO_NETWORK=1`.
    pub fn from_env(
        config: ProviderConfig,
        registry: &AdapterRegistry,
        transport: Option<Arc<dyn Transport>>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let var = config.credential_ref.clone().unwrap_or_default();
        let api_key = std::env::var(&var)
            .map_err(|_| GatewayError::Config(format!("credential variable {var} is not set")))?;
        let adapter = registry
            .get(&config.adapter)
            .ok_or_else(|| GatewayError::Config(format!("unknown adapter kind {:?}", config.adapter)))?;
        let transport =
            transport.unwrap_or_else(|| Arc::new(UreqTransport::new(Duration::from_millis(config.timeout_ms))));
        let disabled = std::env::var(NO_NETWORK_ENV).is_ok_and(|v| v == "1");
        Ok(Self::new(config, adapter, transport, api_key).disable_network(disabled))
    }

    pub fn new(
        config: ProviderConfig,
        adapter: Arc<dyn WireAdapter>,
        transport: Arc<dyn Transport>,
        api_key: impl Into<String>,
    ) -> Self {
        Self {
            limiter: TokenBucket::new(config.rate_limit_rps, config.burst.max(1)),
            slots: Slots::new(config.max_in_flight.max(1)),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config: ProviderConfig {
                kind: ProviderKind::LiveApi,
                ..config
            },
            adapter,
            transport,
            api_key: api_key.into(),
            network_disabled: false,
        }
    }

    pub fn disable_network(mut self, disabled: bool) -> Self {
        self.network_disabled = disabled;
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn jitter(&self) -> f64 {
        self.rng.lock().unwrap_or_else(|p| p.into_inner()).gen_range(-1.0..=1.0)
    }

    fn attempt(&self, request: &LmmRequest, image: Option<&[u8]>) -> Result<String, ProviderFailure> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let http = self.adapter.build_request(endpoint, &self.api_key, request, image);
        let _slot = self.slots.take();
        self.limiter.acquire();
        match self.transport.post(&http) {
            Ok(resp) => self.adapter.parse_response(&resp),
            Err(e) => Err(ProviderFailure::Transient(e.to_string())),
        }
    }
}

impl LmmProvider for LiveProvider {
    fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        if self.network_disabled {
            return Err(GatewayError::NetworkDisabled);
        }
        let image = request.image.as_ref().map(|a| a.read_verified()).transpose()?;
        let started = Instant::now();
        let mut retries = 0u32;
        let mut errors: Vec<String> = Vec::new();
        loop {
            match self.attempt(request, image.as_deref()) {
                Ok(text) => {
                    return Ok(LmmExchange {
                        request: request.clone(),
                        answer_text: strip_trailing_newlines(&text).to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        provider_meta: serde_json::json!({
                            "adapter": self.adapter.kind(),
                            "retries": retries,
                            "transient_errors": errors,
                        }),
                        from_cache: false,
                    })
                }
                Err(ProviderFailure::Authentication(m)) => return Err(GatewayError::Authentication(m)),
                Err(ProviderFailure::Malformed(m)) => return Err(GatewayError::MalformedRequest(m)),
                Err(ProviderFailure::Refusal(detail)) => {
                    return Err(GatewayError::SafetyRefusal {
                        model_id: request.model_id.clone(),
                        detail,
                    })
                }
                Err(ProviderFailure::Transient(m)) => {
                    if retries >= self.config.max_retries {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: retries + 1,
                            last: m,
                        });
                    }
                    let delay = backoff_delay(self.config.backoff_base_ms, retries, self.jitter());
                    log::debug!("transient failure ({m}); retrying in {delay:?}");
                    errors.push(m);
                    thread::sleep(delay);
                    retries += 1;
                }
            }
        }
    }
}
