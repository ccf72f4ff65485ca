#!/usr/bin/env node
/**
 * score-bridge: serve the depth-conditioned scoring model over the
 * line-JSON wire protocol.
 *
 *   score-bridge --stdio                      # default transport
 *   score-bridge --listen 127.0.0.1:7077      # TCP, one loop per client
 *
 * Options: --model <id> (default shaded-v1), --device cpu,
 * --latent-h/--latent-w (when set, requests must match), --timeout <s>.
 *
 * Bad requests are answered with the err field set and the loop keeps
 * running; only startup problems (unknown model, unparseable flags, a
 * bind failure) exit non-zero.
 */

import { createInterface } from 'readline';
import { createServer } from 'net';
import { BridgeConfig, DEFAULT_CONFIG, ShadedDepthModel, validateConfig } from './model.js';
import { handleLineJson } from './protocol.js';

interface CliOptions {
  config: BridgeConfig;
  mode: 'stdio' | 'listen';
  host: string;
  port: number;
}

export function parseArgs(argv: string[]): CliOptions {
  const config = { ...DEFAULT_CONFIG };
  let mode: 'stdio' | 'listen' = 'stdio';
  let host = '127.0.0.1';
  let port = 0;
  const takeValue = (flag: string, i: number): string => {
    if (i + 1 >= argv.length) throw new Error(`${flag} needs a value`);
    return argv[i + 1];
  };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    switch (arg) {
      case '--stdio':
        mode = 'stdio';
        break;
      case '--listen': {
        mode = 'listen';
        const addr = takeValue(arg, i++);
        const colon = addr.lastIndexOf(':');
        if (colon <= 0) throw new Error(`--listen needs host:port, got ${JSON.stringify(addr)}`);
        host = addr.slice(0, colon);
        port = Number(addr.slice(colon + 1));
        if (!Number.isInteger(port) || port < 0 || port > 65535) {
          throw new Error(`bad port in ${JSON.stringify(addr)}`);
        }
        break;
      }
      case '--model':
        config.model = takeValue(arg, i++);
        break;
      case '--device':
        config.device = takeValue(arg, i++);
        break;
      case '--latent-h':
        config.latentH = Number(takeValue(arg, i++));
        break;
      case '--latent-w':
        config.latentW = Number(takeValue(arg, i++));
        break;
      case '--timeout':
        config.timeoutS = Number(takeValue(arg, i++));
        break;
      default:
        throw new Error(`unknown flag ${JSON.stringify(arg)}`);
    }
  }
  validateConfig(config);
  return { config, mode, host, port };
}

function serveStdio(model: ShadedDepthModel): void {
  const rl = createInterface({ input: process.stdin, terminal: false });
  rl.on('line', (line) => {
    if (line.trim().length === 0) return;
    process.stdout.write(handleLineJson(line, model) + '\n');
  });
}

function serveTcp(model: ShadedDepthModel, host: string, port: number): void {
  const server = createServer((socket) => {
    const rl = createInterface({ input: socket, terminal: false });
    rl.on('line', (line) => {
      if (line.trim().length === 0) return;
      socket.write(handleLineJson(line, model) + '\n');
    });
    socket.on('error', () => socket.destroy()); // client went away mid-write
  });
  server.on('error', (e) => {
    process.stderr.write(`bind failed: ${e.message}\n`);
    process.exit(1);
  });
  server.listen(port, host, () => {
    const addr = server.address();
    const actual = typeof addr === 'object' && addr ? addr.port : port;
    process.stderr.write(`listening on ${host}:${actual}\n`);
  });
}

export function main(argv: string[]): void {
  let opts: CliOptions;
  try {
    opts = parseArgs(argv);
  } catch (e) {
    process.stderr.write(`error: ${(e as Error).message}\n`);
    process.exit(1);
    return;
  }
  const model = new ShadedDepthModel(opts.config);
  if (opts.mode === 'stdio') serveStdio(model);
  else serveTcp(model, opts.host, opts.port);
}

main(process.argv.slice(2));
