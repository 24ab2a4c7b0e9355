/**
 * Typed client for the completion service. All images are base64 PNG;
 * errors surface as ApiRequestError carrying the service's machine-readable
 * code, never swallowed.
 */

export interface ReferencePayload {
  label: string;
  image: string;
  mask: string;
}

export interface CompletionRequest {
  source: string;
  mask: string;
  references: ReferencePayload[];
  prompt?: string | null;
  seed: number;
  steps?: number;
  guidance?: number;
}

export interface CompletionResponse {
  image: string;
  duration_ms: number;
  seed: number;
  steps: number;
  guidance: number;
}

export interface GroupSummary {
  group_id: string;
  prompt: string | null;
  reference_labels: string[];
}

export interface GroupDetail {
  group_id: string;
  prompt: string | null;
  source: string;
  mask: string;
  ground_truth: string;
  references: Array<{ label: string; image: string; mask: string; caption: string }>;
}

export class ApiRequestError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    public readonly detail: string,
  ) {
    super(`${status} ${code}: ${detail}`);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private readonly base: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.base}${path}`, {
      headers: { "content-type": "application/json" },
      ...init,
    });
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      throw new ApiRequestError(
        res.status,
        (body as { error?: string }).error ?? "unknown_error",
        (body as { detail?: string }).detail ?? res.statusText,
      );
    }
    return body as T;
  }

  complete(req: CompletionRequest): Promise<CompletionResponse> {
    return this.request("/v1/complete", {
      method: "POST",
      body: JSON.stringify(req),
    });
  }

  async listGroups(): Promise<GroupSummary[]> {
    const body = await this.request<{ groups: GroupSummary[] }>("/v1/benchmark/groups");
    return body.groups;
  }

  getGroup(groupId: string): Promise<GroupDetail> {
    return this.request(`/v1/benchmark/groups/${encodeURIComponent(groupId)}`);
  }

  putMask(groupId: string, maskB64: string): Promise<{ stored: boolean; warning?: string }> {
    return this.request(`/v1/benchmark/groups/${encodeURIComponent(groupId)}/mask`, {
      method: "PUT",
      body: JSON.stringify({ mask: maskB64 }),
    });
  }
}
