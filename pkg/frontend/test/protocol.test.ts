import { ChildProcess, spawn } from "node:child_process";
import { once } from "node:events";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { AnnotationClient } from "../src/client.js";
import { decodeBase64, decodePgm, decodePpm } from "../src/ppm.js";
import { SessionController } from "../src/session.js";

const PY = process.env.APISLAB_PYTHON ?? "python3";
const PORT = 8123 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

const CONFIG = { name: "proto", strategy: "entropy", seed: 3, steps: 1, schedule: "short" };

let root: string;
let dataDir: string;
let server: ChildProcess;

function run(args: string[], env: Record<string, string> = {}): Promise<void> {
  return new Promise((resolve, reject) => {
    const child = spawn(PY, ["-m", "apislab.cli", ...args], {
      env: { ...process.env, ...env },
      stdio: ["ignore", "inherit", "inherit"],
    });
    child.on("exit", (code) => (code === 0 ? resolve() : reject(new Error(`exit ${code}: ${args.join(" ")}`))));
  });
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

beforeAll(async () => {
  root = fs.mkdtempSync(path.join(os.tmpdir(), "annotator-proto-"));
  dataDir = path.join(root, "data");
  await run(["gen-data", "--seed", "7", "--train", "3", "--test", "2", "--out", dataDir]);
  await run(
    ["run", "--data", dataDir, "--name", "sim", "--strategy", "entropy", "--seed", "3", "--steps", "1", "--schedule", "short"],
    { APIS_RUN_ROOT: path.join(root, "runs") },
  );
  server = spawn(PY, ["-m", "apislab.cli", "serve", "--port", String(PORT)], {
    stdio: ["ignore", "ignore", "inherit"],
  });
  const client = new AnnotationClient(BASE);
  const deadline = Date.now() + 30_000;
  while (!(await client.health())) {
    if (Date.now() > deadline) throw new Error("service did not come up");
    await sleep(100);
  }
}, 120_000);

afterAll(async () => {
  if (server && server.exitCode === null) {
    server.kill("SIGTERM");
    await Promise.race([once(server, "exit"), sleep(3000)]);
  }
});

/** Ground-truth label for a query, read from the dataset's mask rasters. */
function truthLabel(queryId: string, x: number, y: number): 0 | 1 {
  const parts = queryId.split("/");
  expect(parts).toHaveLength(3); // s<step>/<image_id>/<instance_id>
  const [, imageId, instanceId] = parts as [string, string, string];
  const maskPath = path.join(dataDir, "train", "masks", `${imageId}__${instanceId}.pgm`);
  const mask = decodePgm(new Uint8Array(fs.readFileSync(maskPath)));
  return mask.data[y * mask.width + x]! > 127 ? 1 : 0;
}

/** Answer every query per ground truth until the run finishes. */
async function driveSession(client: AnnotationClient, sessionId: string): Promise<number> {
  const controller = new SessionController(client, sessionId, {}, 20);
  let answers = 0;
  const deadline = Date.now() + 300_000;
  for (;;) {
    if (Date.now() > deadline) throw new Error("session did not finish");
    await controller.pollLoop();
    if (controller.state.phase === "finished") return answers;
    if (controller.state.phase !== "query") {
      await sleep(20);
      continue;
    }
    const q = controller.state.query;
    const image = decodePpm(decodeBase64(q.image)); // what a human would see
    expect(q.point.x).toBeGreaterThanOrEqual(0);
    expect(q.point.x).toBeLessThan(image.width);
    expect(q.point.y).toBeGreaterThanOrEqual(0);
    expect(q.point.y).toBeLessThan(image.height);
    const label = truthLabel(q.query_id, q.point.x, q.point.y);
    // fire the key handler twice to model a nervous double-press
    const ok = await Promise.all([controller.handleKey(label === 1 ? "y" : "n"), controller.handleKey(label === 1 ? "y" : "n")]);
    expect(ok.filter(Boolean)).toHaveLength(1);
    answers++;
  }
}

describe("protocol equivalence with the simulated annotator", () => {
  it("a scripted ground-truth session reproduces the simulated run byte-for-byte", async () => {
    const client = new AnnotationClient(BASE);
    const uiRun = path.join(root, "runs", "ui");
    const sessionId = await client.createSession({ data_dir: dataDir, run_dir: uiRun, config: CONFIG });
    const answers = await driveSession(client, sessionId);
    expect(answers).toBeGreaterThan(0);

    const simRun = path.join(root, "runs", "sim");
    const artifacts = fs
      .readdirSync(simRun)
      .filter((f) => /^points_step_\d+\.json$/.test(f) || /^model_step_\d+\.bin$/.test(f))
      .sort();
    expect(artifacts.length).toBeGreaterThanOrEqual(2);
    for (const name of artifacts) {
      const sim = fs.readFileSync(path.join(simRun, name));
      const ui = fs.readFileSync(path.join(uiRun, name));
      expect(ui.equals(sim), `${name} differs between human and simulated runs`).toBe(true);
    }

    const metrics = await client.metrics(sessionId);
    expect(metrics.finished).toBe(true);
    expect(metrics.rows.length).toBeGreaterThan(0);
  }, 300_000);
});
