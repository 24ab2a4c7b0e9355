/**
 * Canvas session state: strokes and the mask they rasterize to, selected
 * references, sampler knobs, and an append-only result history (capped).
 * The session holds no model state — every result is attributable to a
 * recorded request.
 */

import { ApiClient, CompletionRequest, CompletionResponse, ReferencePayload } from "./api.js";
import { Stroke, maskIsEmpty, rasterizeStrokes } from "./mask.js";
import { bytesToBase64, encodeMaskPng } from "./png.js";

export interface HistoryEntry {
  request: CompletionRequest;
  response: CompletionResponse;
  at: number;
}

export interface SubmitBlocked {
  blocked: true;
  code: string;
  message: string;
}

export const HISTORY_LIMIT = 20;

export class CanvasSession {
  strokes: Stroke[] = [];
  seed = 0;
  steps = 50;
  guidance = 7.5;
  prompt: string | null = null;
  history: HistoryEntry[] = [];

  private source: string | null = null;
  private references = new Map<string, ReferencePayload>();
  private enabled = new Set<string>();
  private pending = false;

  constructor(
    public readonly width: number,
    public readonly height: number,
  ) {}

  setSource(sourceB64: string): void {
    this.source = sourceB64;
  }

  setReferences(refs: ReferencePayload[]): void {
    this.references.clear();
    this.enabled.clear();
    for (const ref of refs) {
      this.references.set(ref.label, ref);
      this.enabled.add(ref.label);
    }
  }

  toggleReference(label: string, on: boolean): void {
    if (!this.references.has(label)) return;
    if (on) this.enabled.add(label);
    else this.enabled.delete(label);
  }

  activeReferences(): ReferencePayload[] {
    return [...this.references.values()].filter((r) => this.enabled.has(r.label));
  }

  addStroke(stroke: Stroke): void {
    this.strokes.push(stroke);
  }

  undoStroke(): void {
    this.strokes.pop();
  }

  clearStrokes(): void {
    this.strokes = [];
  }

  /** Deterministic re-rasterization of the stroke list. */
  rasterize(): Uint8Array {
    return rasterizeStrokes(this.strokes, this.width, this.height);
  }

  /** Binary mask PNG per the pipeline contract (0/255, threshold 128). */
  exportMaskPng(): Uint8Array {
    return encodeMaskPng(this.rasterize(), this.width, this.height);
  }

  maskEmpty(): boolean {
    return maskIsEmpty(this.rasterize());
  }

  get inFlight(): boolean {
    return this.pending;
  }

  buildRequest(): CompletionRequest {
    if (this.source === null) throw new Error("no source image loaded");
    return {
      source: this.source,
      mask: bytesToBase64(this.exportMaskPng()),
      references: this.activeReferences(),
      prompt: this.prompt,
      seed: this.seed,
      steps: this.steps,
      guidance: this.guidance,
    };
  }

  /**
   * Run a completion. An empty mask is blocked client-side with the same
   * machine-readable code the service would return (422 empty_mask); at
   * most one request is in flight per session.
   */
  async requestCompletion(
    client: ApiClient,
  ): Promise<CompletionResponse | SubmitBlocked> {
    if (this.maskEmpty()) {
      return { blocked: true, code: "empty_mask",
               message: "draw a mask before submitting" };
    }
    if (this.pending) {
      return { blocked: true, code: "request_in_flight",
               message: "a completion is already running" };
    }
    const request = this.buildRequest();
    this.pending = true;
    try {
      const response = await client.complete(request);
      this.history.push({ request, response, at: Date.now() });
      if (this.history.length > HISTORY_LIMIT) {
        this.history.splice(0, this.history.length - HISTORY_LIMIT);
      }
      return response;
    } finally {
      this.pending = false;
    }
  }

  async saveBenchmarkMask(
    client: ApiClient, groupId: string,
  ): Promise<{ stored: boolean; warning?: string }> {
    return client.putMask(groupId, bytesToBase64(this.exportMaskPng()));
  }
}
