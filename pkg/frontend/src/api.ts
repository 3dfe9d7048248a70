/** Typed client for the pipeline service HTTP API. */

export interface ClassInfo {
  id: number;
  name: string;
  color: [number, number, number];
}

export interface SampleInfo {
  id: number;
  has_mask: boolean;
  has_latent: boolean;
  seed: number | null;
}

export interface TrainStatus {
  state: "idle" | "running" | "done" | "failed";
  progress: number;
  error: string | null;
  metrics: Record<string, unknown> | null;
}

export interface PredictResult {
  mask_png_base64: string;
  overlay_png_base64: string;
  confidence_png_base64: Record<string, string>;
  classes: string[];
}

export interface TrainRequest {
  shots?: number;
  arch?: string;
  epochs?: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly body: Record<string, unknown>,
  ) {
    super(`HTTP ${status}: ${body.error ?? "request failed"}`);
  }
}

async function parseJson(response: Response): Promise<Record<string, unknown>> {
  try {
    return (await response.json()) as Record<string, unknown>;
  } catch {
    return {};
  }
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  private async checked(response: Response): Promise<Record<string, unknown>> {
    const body = await parseJson(response);
    if (!response.ok) throw new ApiError(response.status, body);
    return body;
  }

  async getClasses(): Promise<{ classes: ClassInfo[]; ignore_value: number }> {
    const body = await this.checked(await fetch(this.url("/classes")));
    return body as unknown as { classes: ClassInfo[]; ignore_value: number };
  }

  async listSamples(): Promise<SampleInfo[]> {
    const body = await this.checked(await fetch(this.url("/samples")));
    return (body.samples as SampleInfo[]) ?? [];
  }

  imageUrl(sampleId: number): string {
    return this.url(`/samples/${sampleId}/image`);
  }

  /** Raw stored mask bytes, or null when the sample has no mask yet. */
  async getMaskBytes(sampleId: number): Promise<Uint8Array | null> {
    const response = await fetch(this.url(`/samples/${sampleId}/mask`));
    if (response.status === 404) return null;
    if (!response.ok) throw new ApiError(response.status, await parseJson(response));
    return new Uint8Array(await response.arrayBuffer());
  }

  async putMask(sampleId: number, png: Uint8Array): Promise<void> {
    const response = await fetch(this.url(`/samples/${sampleId}/mask`), {
      method: "PUT",
      headers: { "content-type": "image/png" },
      body: png as unknown as BodyInit,
    });
    await this.checked(response);
  }

  /** Starts few-shot training; throws ApiError(409) when one is running. */
  async startTraining(request: TrainRequest = {}): Promise<void> {
    const response = await fetch(this.url("/train"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    await this.checked(response);
  }

  async getTrainStatus(): Promise<TrainStatus> {
    const body = await this.checked(await fetch(this.url("/train/status")));
    return body as unknown as TrainStatus;
  }

  async predictSample(sampleId: number, useAutoshot = false): Promise<PredictResult> {
    const response = await fetch(this.url("/predict"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ sample_id: sampleId, use_autoshot: useAutoshot }),
    });
    return (await this.checked(response)) as unknown as PredictResult;
  }
}

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}
