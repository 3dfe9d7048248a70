/**
 * Live-server integration: the annotate -> train -> preview loop against a
 * real desk-scale backend. Requires the python package to be installed
 * (`pip install -e ..`); run via `npm run test:integration`.
 */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { MaskCanvas } from "../src/maskpaint.js";
import { decodePng, encodeGrayPng } from "../src/png.js";

const PYTHON = process.env.PYTHON ?? "python3";
const PORT = 8741 + (process.pid % 50);
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;
let projectDir: string;
const api = new ApiClient(BASE);

function cli(...args: string[]): void {
  const result = spawnSync(
    PYTHON,
    ["-m", "ganseg.cli", "-p", join(projectDir, "project.json"), ...args],
    { encoding: "utf8" },
  );
  if (result.status !== 0) {
    throw new Error(`ganseg ${args[0]} failed: ${result.stderr || result.stdout}`);
  }
}

async function waitForServer(timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      await api.getClasses();
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 250));
    }
  }
  throw new Error("server did not come up");
}

async function waitForTraining(timeoutMs = 180_000): Promise<string> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    const status = await api.getTrainStatus();
    if (status.state === "done" || status.state === "failed") {
      if (status.state === "failed") throw new Error(`training failed: ${status.error}`);
      return status.state;
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error("training did not finish in time");
}

beforeAll(async () => {
  projectDir = mkdtempSync(join(tmpdir(), "ganseg-ui-"));
  cli("init", "--root", projectDir, "--seed", "0");
  const configPath = join(projectDir, "project.json");
  const config = JSON.parse(readFileSync(configPath, "utf8"));
  config.dataset.size = 360;
  config.gan_train = { steps: 40, batch_size: 8 };
  config.fewshot = { arch: "CNN_S", epochs: 2 };
  config.inversion = { steps: 2 };
  writeFileSync(configPath, JSON.stringify(config));
  cli("make-dataset");
  cli("train-gan");
  cli("gen-samples", "--n", "2", "--seed", "3");

  server = spawn(
    PYTHON,
    ["-m", "ganseg.cli", "-p", configPath, "serve", "--port", String(PORT)],
    { stdio: "ignore" },
  );
  await waitForServer();
}, 240_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("S1: mask round trip", () => {
  it("uploads the painted mask and fetches back bit-identical bytes", async () => {
    const { classes } = await api.getClasses();
    expect(classes.length).toBeGreaterThanOrEqual(2);

    const mask = new MaskCanvas(32, 32);
    mask.fill(0);
    mask.paintStroke({ classId: 1, radius: 6 }, [{ x: 16, y: 18 }]);
    mask.paintStroke({ classId: 3, radius: 3 }, [{ x: 24, y: 12 }]);
    mask.paintStroke({ classId: 2, radius: 2 }, [{ x: 12, y: 16 }, { x: 18, y: 20 }]);
    const canvasState = mask.snapshot();

    const png = await encodeGrayPng(32, 32, canvasState);
    await api.putMask(0, png);

    const fetched = await api.getMaskBytes(0);
    expect(fetched).not.toBeNull();
    expect(Array.from(fetched!)).toEqual(Array.from(png)); // exact bytes

    const decoded = await decodePng(fetched!);
    expect(Array.from(decoded.data)).toEqual(Array.from(canvasState));
  }, 60_000);

  it("server rejects out-of-palette paints verbatim to the client", async () => {
    const bad = new Uint8Array(32 * 32).fill(9);
    const png = await encodeGrayPng(32, 32, bad);
    await expect(api.putMask(0, png)).rejects.toThrowError(ApiError);
    try {
      await api.putMask(0, png);
    } catch (err) {
      expect((err as ApiError).status).toBe(422);
      expect((err as ApiError).body.offending_value).toBe(9);
    }
  }, 60_000);
});

describe("S2: annotate -> train -> preview loop", () => {
  it("runs the loop, surfaces training conflicts, and preview changes after training",
     async () => {
    // quick first model
    await api.startTraining({ epochs: 1 });
    await waitForTraining();
    const before = await api.predictSample(0);
    const beforeMask = await decodePng(
      new Uint8Array(Buffer.from(before.mask_png_base64, "base64")));

    // a longer run must reject a concurrent request with 409
    await api.startTraining({ epochs: 60 });
    let conflict: ApiError | null = null;
    try {
      await api.startTraining({ epochs: 1 });
    } catch (err) {
      conflict = err as ApiError;
    }
    expect(conflict).not.toBeNull();
    expect(conflict!.status).toBe(409);
    await waitForTraining();

    const after = await api.predictSample(0);
    const afterMask = await decodePng(
      new Uint8Array(Buffer.from(after.mask_png_base64, "base64")));
    expect(afterMask.width).toBe(32);
    // the preview must change once the model has actually trained
    expect(Array.from(afterMask.data)).not.toEqual(Array.from(beforeMask.data));
    expect(Object.keys(after.confidence_png_base64).length).toBeGreaterThanOrEqual(2);
  }, 240_000);
});
